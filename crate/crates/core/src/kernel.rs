//! Ternary × INT8 matrix-vector kernels with exact `i32` accumulation.
//!
//! [`gemv_ref`] is the scalar oracle. [`gemv_fast`] walks the packed rows in
//! 8-byte (32-code) blocks and skips all-zero blocks. For tall matrices it
//! first tabulates, for every group of four activations, the dot product
//! with each of the 256 possible packed bytes, so a row costs one table add
//! per byte. Short matrices decode blocks through a byte lookup table into a
//! dense `i8` dot product instead. All paths agree bit for bit.
//!
//! Every kernel records what it actually did in [`OpCounters`]. The
//! thread-local totals are read with [`counters_snapshot`].

use std::cell::Cell;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pack::{decode_field, PackedTernaryMatrix};
use crate::quant::{check_finite, quantize_token, ACT_LEVELS};
use crate::tensor::Tensor;

/// Largest supported reduction length: `n * 128 < 2^31`.
pub const MAX_REDUCTION: usize = 16_000_000;

/// Float multiplies (divisions included) spent on scale setup per token:
/// `127 / beta` for quantization and `alpha * beta / 127` for rescaling.
pub const SCALE_SETUP_MULS: u64 = 3;

const BLOCK_BYTES: usize = 8;
const BLOCK_CODES: usize = BLOCK_BYTES * 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub int_adds: u64,
    pub float_muls: u64,
    pub skipped_zero_weights: u64,
}

impl Add for OpCounters {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            int_adds: self.int_adds + o.int_adds,
            float_muls: self.float_muls + o.float_muls,
            skipped_zero_weights: self.skipped_zero_weights + o.skipped_zero_weights,
        }
    }
}

impl AddAssign for OpCounters {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

thread_local! {
    static COUNTERS: Cell<OpCounters> = const { Cell::new(OpCounters { int_adds: 0, float_muls: 0, skipped_zero_weights: 0 }) };
}

fn record(c: OpCounters) {
    COUNTERS.with(|cell| cell.set(cell.get() + c));
}

/// Totals recorded on the calling thread since the last reset.
pub fn counters_snapshot() -> OpCounters {
    COUNTERS.with(Cell::get)
}

pub fn counters_reset() {
    COUNTERS.with(|cell| cell.set(OpCounters::default()));
}

const fn build_lut() -> [[i8; 4]; 256] {
    let mut lut = [[0i8; 4]; 256];
    let mut b = 0;
    while b < 256 {
        let mut f = 0;
        while f < 4 {
            let bits = ((b >> (2 * f)) & 0b11) as u8;
            lut[b][f] = ((bits << 6) as i8) >> 6;
            f += 1;
        }
        b += 1;
    }
    lut
}

static DECODE_LUT: [[i8; 4]; 256] = build_lut();

fn check_dims(w: &PackedTernaryMatrix, a: &[i8]) -> Result<()> {
    if w.cols() != a.len() {
        return Err(Error::shape("gemv", &[w.rows(), w.cols()], &[a.len()]));
    }
    if w.cols() > MAX_REDUCTION {
        return Err(Error::contract(format!(
            "reduction length {} exceeds the int32-safe bound {MAX_REDUCTION}",
            w.cols()
        )));
    }
    Ok(())
}

/// Scalar oracle: decodes every code, skips zeros, accumulates in `i32`.
pub fn gemv_ref_with(w: &PackedTernaryMatrix, a: &[i8], counters: &mut OpCounters) -> Result<Vec<i32>> {
    check_dims(w, a)?;
    let mut out = Vec::with_capacity(w.rows());
    for r in 0..w.rows() {
        let row = w.packed_row(r);
        let mut acc: i32 = 0;
        for (j, &x) in a.iter().enumerate() {
            let bits = (row[j / 4] >> (2 * (j % 4))) & 0b11;
            if bits == 0b10 {
                return Err(Error::Corrupt {
                    offset: r * w.row_bytes() + j / 4,
                });
            }
            match decode_field(bits) {
                0 => counters.skipped_zero_weights += 1,
                1 => {
                    acc += x as i32;
                    counters.int_adds += 1;
                }
                _ => {
                    acc -= x as i32;
                    counters.int_adds += 1;
                }
            }
        }
        out.push(acc);
    }
    Ok(out)
}

pub fn gemv_ref(w: &PackedTernaryMatrix, a: &[i8]) -> Result<Vec<i32>> {
    let mut c = OpCounters::default();
    let out = gemv_ref_with(w, a, &mut c)?;
    record(c);
    Ok(out)
}

#[inline]
fn block_dot(bytes: &[u8], acts: &[i8]) -> i32 {
    let mut wcodes = [0i8; BLOCK_CODES];
    for (k, &b) in bytes.iter().enumerate() {
        wcodes[4 * k..4 * k + 4].copy_from_slice(&DECODE_LUT[b as usize]);
    }
    let mut acc = 0i32;
    for (&wc, &x) in wcodes.iter().zip(acts) {
        acc += wc as i32 * x as i32;
    }
    acc
}

/// Rows from which the per-call activation tables pay for themselves.
const TABLE_MIN_ROWS: usize = 32;

/// Value of each 2-bit field; the reserved code never reaches a kernel
/// because packed matrices are validated on construction.
const FIELD: [i16; 4] = [0, 1, -2, -1];

/// `tables[g][b]` is the dot product of packed byte `b` with activations
/// `4g..4g + 4`. Activations past the end count as zero, so padding fields
/// contribute nothing. Entries are bounded by `4 * 2 * 128` and fit `i16`.
fn act_tables(a: &[i8]) -> Vec<[i16; 256]> {
    let mut tables = vec![[0i16; 256]; a.len().div_ceil(4)];
    for (g, t) in tables.iter_mut().enumerate() {
        let x = |f: usize| a.get(4 * g + f).map_or(0, |&v| v as i16);
        let pair = |x0: i16, x1: i16| {
            let mut p = [0i16; 16];
            for (c, v) in p.iter_mut().enumerate() {
                *v = FIELD[c & 3] * x0 + FIELD[c >> 2] * x1;
            }
            p
        };
        let (lo, hi) = (pair(x(0), x(1)), pair(x(2), x(3)));
        for (h, chunk) in t.chunks_exact_mut(16).enumerate() {
            for (v, l) in chunk.iter_mut().zip(lo) {
                *v = hi[h] + l;
            }
        }
    }
    tables
}

fn gemv_fast_rows(w: &PackedTernaryMatrix, a: &[i8], tables: Option<&[[i16; 256]]>, rows: std::ops::Range<usize>, out: &mut [i32]) -> OpCounters {
    let n = w.cols();
    let full_blocks = n / BLOCK_CODES;
    let mut c = OpCounters::default();
    for (o, r) in out.iter_mut().zip(rows) {
        let row = w.packed_row(r);
        let mut acc = 0i32;
        for blk in 0..full_blocks {
            let bytes = &row[blk * BLOCK_BYTES..(blk + 1) * BLOCK_BYTES];
            if u64::from_le_bytes(bytes.try_into().unwrap()) == 0 {
                c.skipped_zero_weights += BLOCK_CODES as u64;
                continue;
            }
            acc += match tables {
                Some(t) => {
                    let t = &t[blk * BLOCK_BYTES..(blk + 1) * BLOCK_BYTES];
                    bytes.iter().zip(t).map(|(&b, tg)| tg[b as usize] as i32).sum::<i32>()
                }
                None => block_dot(bytes, &a[blk * BLOCK_CODES..(blk + 1) * BLOCK_CODES]),
            };
            c.int_adds += BLOCK_CODES as u64;
        }
        for (j, &x) in a.iter().enumerate().skip(full_blocks * BLOCK_CODES) {
            let code = DECODE_LUT[row[j / 4] as usize][j % 4];
            if code == 0 {
                c.skipped_zero_weights += 1;
            } else {
                acc += code as i32 * x as i32;
                c.int_adds += 1;
            }
        }
        *o = acc;
    }
    c
}

fn tables_for(w: &PackedTernaryMatrix, a: &[i8]) -> Option<Vec<[i16; 256]>> {
    (w.rows() >= TABLE_MIN_ROWS && a.len() >= BLOCK_CODES).then(|| act_tables(a))
}

/// Blocked kernel; bitwise-identical results to [`gemv_ref`].
pub fn gemv_fast_with(w: &PackedTernaryMatrix, a: &[i8], counters: &mut OpCounters) -> Result<Vec<i32>> {
    check_dims(w, a)?;
    let mut out = vec![0i32; w.rows()];
    let tables = tables_for(w, a);
    *counters += gemv_fast_rows(w, a, tables.as_deref(), 0..w.rows(), &mut out);
    Ok(out)
}

pub fn gemv_fast(w: &PackedTernaryMatrix, a: &[i8]) -> Result<Vec<i32>> {
    let mut c = OpCounters::default();
    let out = gemv_fast_with(w, a, &mut c)?;
    record(c);
    Ok(out)
}

/// [`gemv_fast`] split over `threads` scoped threads by output row. Each row
/// is computed exactly as in the single-threaded kernel.
pub fn gemv_fast_parallel(w: &PackedTernaryMatrix, a: &[i8], threads: usize) -> Result<Vec<i32>> {
    check_dims(w, a)?;
    let threads = threads.clamp(1, w.rows().max(1));
    let mut out = vec![0i32; w.rows()];
    let per = w.rows().div_ceil(threads);
    let tables = tables_for(w, a);
    let tables = tables.as_deref();
    let total = std::thread::scope(|s| {
        let handles: Vec<_> = out
            .chunks_mut(per)
            .enumerate()
            .map(|(i, chunk)| {
                let start = i * per;
                s.spawn(move || gemv_fast_rows(w, a, tables, start..start + chunk.len(), chunk))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gemv worker panicked"))
            .fold(OpCounters::default(), Add::add)
    });
    record(total);
    Ok(out)
}

/// Packed ternary linear layer on full-precision input: per token, absmax
/// INT8 quantization, integer matvec, then rescale by `alpha * beta / 127`.
pub fn linear_forward_with(w: &PackedTernaryMatrix, x: &Tensor, counters: &mut OpCounters) -> Result<Tensor> {
    let (tokens, n) = x.dims2();
    if n != w.cols() {
        return Err(Error::shape("linear_forward", &[w.rows(), w.cols()], x.shape()));
    }
    check_finite(x, "linear_forward input")?;
    let m = w.rows();
    let mut codes = vec![0i8; n];
    let mut out = Vec::with_capacity(tokens * m);
    for t in 0..tokens {
        let beta = quantize_token(x.row(t), &mut codes);
        counters.float_muls += n as u64;
        let acc = gemv_fast_with(w, &codes, counters)?;
        let scale = w.alpha() * beta / ACT_LEVELS;
        out.extend(acc.iter().map(|&v| v as f64 * scale));
        counters.float_muls += m as u64 + SCALE_SETUP_MULS;
    }
    Ok(Tensor::matrix(tokens, m, out))
}

pub fn linear_forward(w: &PackedTernaryMatrix, x: &Tensor) -> Result<Tensor> {
    let mut c = OpCounters::default();
    let out = linear_forward_with(w, x, &mut c)?;
    record(c);
    Ok(out)
}

/// Naive full-precision `f32` matvec used as the benchmark baseline.
pub fn float_matvec(w: &[f32], x: &[f32], m: usize, n: usize, out: &mut [f32]) {
    for (r, o) in out.iter_mut().enumerate().take(m) {
        let row = &w[r * n..(r + 1) * n];
        let mut acc = 0.0f32;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o = acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize_acts, quantize_weights};

    fn packed(rows: usize, cols: usize, codes: &[i8]) -> PackedTernaryMatrix {
        PackedTernaryMatrix::pack(codes, rows, cols, 1.0).unwrap()
    }

    #[test]
    fn identity_codes_pass_acts_through() {
        let w = packed(3, 3, &[1, 0, 0, 0, 1, 0, 0, 0, 1]);
        let a = [5, -7, 0];
        assert_eq!(gemv_ref(&w, &a).unwrap(), vec![5, -7, 0]);
        assert_eq!(gemv_fast(&w, &a).unwrap(), vec![5, -7, 0]);
    }

    #[test]
    fn signed_sum_example() {
        let w = packed(1, 3, &[1, -1, 1]);
        assert_eq!(gemv_ref(&w, &[10, 20, 30]).unwrap(), vec![20]);
        assert_eq!(gemv_fast(&w, &[10, 20, 30]).unwrap(), vec![20]);
    }

    #[test]
    fn zero_weights_do_no_adds() {
        let w = packed(4, 70, &[0; 280]);
        let a = vec![3i8; 70];
        let mut c = OpCounters::default();
        assert_eq!(gemv_ref_with(&w, &a, &mut c).unwrap(), vec![0; 4]);
        assert_eq!(c.int_adds, 0);
        let mut c = OpCounters::default();
        assert_eq!(gemv_fast_with(&w, &a, &mut c).unwrap(), vec![0; 4]);
        assert_eq!(c.int_adds, 0);
        assert_eq!(c.skipped_zero_weights, 280);
    }

    #[test]
    fn dimension_mismatch() {
        let w = packed(1, 3, &[1, 1, 1]);
        assert!(matches!(gemv_ref(&w, &[1, 2]), Err(Error::Shape { .. })));
        assert!(matches!(gemv_fast(&w, &[1, 2]), Err(Error::Shape { .. })));
    }

    #[test]
    fn single_element() {
        let w = packed(1, 1, &[-1]);
        assert_eq!(gemv_fast(&w, &[-128]).unwrap(), vec![128]);
        assert_eq!(gemv_ref(&w, &[-128]).unwrap(), vec![128]);
    }

    #[test]
    fn rescale_is_lossless_for_scalar_case() {
        let w = Tensor::matrix(1, 1, vec![2.0]);
        let q = quantize_weights(&w).unwrap();
        assert_eq!((q.alpha, q.codes.as_slice()), (2.0, &[1i8][..]));
        let a = quantize_acts(&Tensor::matrix(1, 1, vec![3.0])).unwrap();
        assert_eq!((a.beta[0], a.codes[0]), (3.0, 127));
        let p = PackedTernaryMatrix::from_quant(&q).unwrap();
        let y = linear_forward(&p, &Tensor::matrix(1, 1, vec![3.0])).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let q = quantize_weights(&Tensor::matrix(2, 3, vec![0.5, -1.0, 0.2, 0.9, 0.1, -0.3])).unwrap();
        let p = PackedTernaryMatrix::from_quant(&q).unwrap();
        let y = linear_forward(&p, &Tensor::zeros(&[1, 3])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn counters_accumulate_per_thread() {
        counters_reset();
        let w = packed(2, 2, &[1, 1, 1, 0]);
        let p = PackedTernaryMatrix::pack(&[1, 1, 1, 0], 2, 2, 0.5).unwrap();
        gemv_ref(&w, &[1, 1]).unwrap();
        let snap = counters_snapshot();
        assert_eq!(snap.int_adds, 3);
        assert_eq!(snap.skipped_zero_weights, 1);
        linear_forward(&p, &Tensor::matrix(1, 2, vec![0.5, -0.25])).unwrap();
        assert_eq!(counters_snapshot().float_muls, 2 + 2 + SCALE_SETUP_MULS);
        counters_reset();
        assert_eq!(counters_snapshot(), OpCounters::default());
    }

    #[test]
    fn parallel_matches_serial() {
        let codes: Vec<i8> = (0..37 * 91).map(|i| ((i * 7) % 3) as i8 - 1).collect();
        let w = packed(37, 91, &codes);
        let a: Vec<i8> = (0..91).map(|i| (i as i8).wrapping_mul(13)).collect();
        assert_eq!(gemv_fast_parallel(&w, &a, 4).unwrap(), gemv_ref(&w, &a).unwrap());
    }

    #[test]
    fn table_path_handles_extremes_and_ragged_tails() {
        for n in [32, 33, 127, 1000] {
            for (w_code, x) in [(-1i8, -128i8), (1, -128), (-1, 127)] {
                let w = packed(TABLE_MIN_ROWS, n, &vec![w_code; TABLE_MIN_ROWS * n]);
                let a = vec![x; n];
                let want = vec![w_code as i32 * x as i32 * n as i32; TABLE_MIN_ROWS];
                assert_eq!(gemv_fast(&w, &a).unwrap(), want);
                assert_eq!(gemv_ref(&w, &a).unwrap(), want);
            }
        }
    }
}
