//! Dense row-major `f64` tensors and the small set of dense kernels the
//! autodiff tape is built on.
//!
//! All reductions run in a fixed order, so results do not depend on how a
//! caller chunks the work.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor dimensions must all be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    /// Builds a 2-D tensor; panics when `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(&[rows, cols], data).expect("matrix dimensions")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("zero tensor shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("full tensor shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns, treating a 1-D tensor as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            other => {
                let c = *other.last().unwrap();
                (self.data.len() / c, c)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Dot product with eight independent accumulators, combined in a fixed order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`.
///
/// Every output element is reduced over `p = 0..k` in order, starting from
/// its current value, so the result does not depend on the blocking or on
/// which instruction set the kernel was compiled for (no fused multiply-add).
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { gemm_avx512(a, b, out, m, k, n) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { gemm_avx2(a, b, out, m, k, n) };
        }
    }
    gemm_blocked::<4, 4>(a, b, out, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_avx512(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_blocked::<8, 16>(a, b, out, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_blocked::<4, 8>(a, b, out, m, k, n)
}

#[inline(always)]
fn gemm_blocked<const MR: usize, const NR: usize>(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let full_cols = n - n % NR;
    for j0 in (0..full_cols).step_by(NR) {
        let mut i0 = 0;
        while i0 + MR <= m {
            let mut acc = [[0.0f64; NR]; MR];
            let a_rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i0 + r) * n + j0..][..NR]);
            }
            for (p, b_row) in b[j0..].chunks(n).take(k).enumerate() {
                let bv: &[f64; NR] = b_row[..NR].try_into().unwrap();
                for (row, a_row) in acc.iter_mut().zip(&a_rows) {
                    let av = a_row[p];
                    for c in 0..NR {
                        row[c] += av * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..][..NR].copy_from_slice(row);
            }
            i0 += MR;
        }
        for i in i0..m {
            let mut acc: [f64; NR] = out[i * n + j0..][..NR].try_into().unwrap();
            for p in 0..k {
                let av = a[i * k + p];
                let bv = &b[p * n + j0..][..NR];
                for c in 0..NR {
                    acc[c] += av * bv[c];
                }
            }
            out[i * n + j0..][..NR].copy_from_slice(&acc);
        }
    }
    if full_cols < n {
        for i in 0..m {
            for j in full_cols..n {
                let mut s = out[i * n + j];
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
    }
}

fn transposed(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out[..m * n].iter_mut().for_each(|v| *v = 0.0);
    gemm_acc(a, b, out, m, k, n);
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transposed(&b[..n * k], n, k);
    matmul_into(a, &bt, out, m, k, n);
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let at = transposed(&a[..m * k], m, k);
    gemm_acc(&at, g, out, k, m, n);
}

/// Plain `a · b` on tensors, outside of any tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::matrix(m, n, out))
}
