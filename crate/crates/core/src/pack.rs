//! 2-bit packed storage for ternary code matrices.
//!
//! Layout (stable, checkpoints depend on it): rows are packed independently,
//! four codes per byte, low bits first. Code `j` of a row lives in bits
//! `2*(j%4)..2*(j%4)+1` of byte `j/4`. Encoding is 2-bit two's complement:
//! `0b00 = 0`, `0b01 = +1`, `0b11 = -1`; `0b10` is reserved and rejected on
//! decode. Padding codes in a row's last byte are zero.

use crate::error::{Error, Result};
use crate::quant::TernaryQuant;

/// Bytes charged for the per-matrix scale in memory accounting.
pub const SCALE_OVERHEAD_BYTES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct PackedTernaryMatrix {
    rows: usize,
    cols: usize,
    bytes: Vec<u8>,
    alpha: f64,
}

#[inline]
pub fn row_bytes(cols: usize) -> usize {
    cols.div_ceil(4)
}

#[inline]
fn encode(code: i8) -> Option<u8> {
    match code {
        0 => Some(0b00),
        1 => Some(0b01),
        -1 => Some(0b11),
        _ => None,
    }
}

/// Sign-extends a 2-bit field: shift left into the top of an `i8`, then
/// arithmetic-shift back.
#[inline]
pub fn decode_field(bits: u8) -> i8 {
    ((bits << 6) as i8) >> 6
}

impl PackedTernaryMatrix {
    pub fn pack(codes: &[i8], rows: usize, cols: usize, alpha: f64) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(Error::shape("pack", &[rows, cols], &[codes.len()]));
        }
        let rb = row_bytes(cols);
        let mut bytes = vec![0u8; rows * rb];
        for r in 0..rows {
            let out = &mut bytes[r * rb..(r + 1) * rb];
            for (j, &c) in codes[r * cols..(r + 1) * cols].iter().enumerate() {
                let bits = encode(c).ok_or_else(|| {
                    Error::contract(format!("code {c} at ({r}, {j}) is not ternary"))
                })?;
                out[j / 4] |= bits << (2 * (j % 4));
            }
        }
        Ok(Self {
            rows,
            cols,
            bytes,
            alpha,
        })
    }

    pub fn from_quant(q: &TernaryQuant) -> Result<Self> {
        Self::pack(&q.codes, q.rows, q.cols, q.alpha)
    }

    /// Rebuilds a matrix from raw bytes, validating length, padding and the
    /// reserved code.
    pub fn from_bytes(rows: usize, cols: usize, bytes: Vec<u8>, alpha: f64) -> Result<Self> {
        let rb = row_bytes(cols);
        if bytes.len() != rows * rb {
            return Err(Error::Format(format!(
                "packed {rows}x{cols} matrix needs {} bytes, found {}",
                rows * rb,
                bytes.len()
            )));
        }
        let m = Self {
            rows,
            cols,
            bytes,
            alpha,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let rb = row_bytes(self.cols);
        let used = self.cols % 4;
        for (off, &b) in self.bytes.iter().enumerate() {
            for f in 0..4 {
                if (b >> (2 * f)) & 0b11 == 0b10 {
                    return Err(Error::Corrupt { offset: off });
                }
            }
            if used != 0 && off % rb == rb - 1 && b >> (2 * used) != 0 {
                return Err(Error::Format(format!(
                    "non-zero padding bits in byte {off}"
                )));
            }
        }
        Ok(())
    }

    pub fn unpack(&self) -> Result<Vec<i8>> {
        let rb = row_bytes(self.cols);
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for j in 0..self.cols {
                let off = r * rb + j / 4;
                let bits = (self.bytes[off] >> (2 * (j % 4))) & 0b11;
                if bits == 0b10 {
                    return Err(Error::Corrupt { offset: off });
                }
                out.push(decode_field(bits));
            }
        }
        Ok(out)
    }

    pub fn to_quant(&self) -> Result<TernaryQuant> {
        Ok(TernaryQuant {
            rows: self.rows,
            cols: self.cols,
            codes: self.unpack()?,
            alpha: self.alpha,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn row_bytes(&self) -> usize {
        row_bytes(self.cols)
    }

    pub fn packed_row(&self, r: usize) -> &[u8] {
        let rb = self.row_bytes();
        &self.bytes[r * rb..(r + 1) * rb]
    }

    /// Storage cost: packed codes plus the scale.
    pub fn storage_bytes(&self) -> usize {
        self.bytes.len() + SCALE_OVERHEAD_BYTES
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MemoryReport {
    pub packed_bytes: u64,
    pub baseline_bytes: u64,
    pub ratio: f64,
}

/// Packed vs dense storage for an `m×n` weight matrix.
pub fn memory_report(m: usize, n: usize, baseline_bits: u32) -> Result<MemoryReport> {
    if baseline_bits != 16 && baseline_bits != 32 {
        return Err(Error::contract(format!(
            "baseline must be 16 or 32 bits, got {baseline_bits}"
        )));
    }
    let packed = (m * row_bytes(n) + SCALE_OVERHEAD_BYTES) as u64;
    let baseline = (m * n) as u64 * baseline_bits as u64 / 8;
    Ok(MemoryReport {
        packed_bytes: packed,
        baseline_bytes: baseline,
        ratio: baseline as f64 / packed as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packs_documented_byte() {
        let p = PackedTernaryMatrix::pack(&[-1, 0, 1, 1], 1, 4, 1.0).unwrap();
        assert_eq!(p.bytes(), &[0x53]);
        assert_eq!(p.unpack().unwrap(), vec![-1, 0, 1, 1]);
    }

    #[test]
    fn zero_row_is_zero_bytes() {
        let p = PackedTernaryMatrix::pack(&[0; 7], 1, 7, 1.0).unwrap();
        assert_eq!(p.bytes(), &[0, 0]);
        let z = PackedTernaryMatrix::from_bytes(1, 4, vec![0x00], 1.0).unwrap();
        assert_eq!(z.unpack().unwrap(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn rows_pad_independently() {
        let codes = [1, 1, 1, 1, 1, -1, -1, -1, -1, -1];
        let p = PackedTernaryMatrix::pack(&codes, 2, 5, 0.5).unwrap();
        assert_eq!(p.bytes().len(), 4);
        assert_eq!(p.bytes()[1], 0b01);
        assert_eq!(p.bytes()[3], 0b11);
        assert_eq!(p.unpack().unwrap(), codes);
    }

    #[test]
    fn rejects_non_ternary_code() {
        assert!(matches!(
            PackedTernaryMatrix::pack(&[2], 1, 1, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn reserved_code_reports_offset() {
        let err = PackedTernaryMatrix::from_bytes(2, 4, vec![0x00, 0b0010_0000], 1.0).unwrap_err();
        assert!(matches!(err, Error::Corrupt { offset: 1 }));
    }

    #[test]
    fn dirty_padding_rejected() {
        assert!(PackedTernaryMatrix::from_bytes(1, 1, vec![0b0100], 1.0).is_err());
    }

    #[test]
    fn memory_examples() {
        let r = memory_report(1024, 1024, 16).unwrap();
        assert_eq!(r.baseline_bytes, 2_097_152);
        assert_eq!(r.packed_bytes, 262_152);
        assert!((r.ratio - 2_097_152.0 / 262_152.0).abs() < 1e-12);
        let r = memory_report(1, 1, 32).unwrap();
        assert_eq!(r.packed_bytes, 9);
        assert!((r.ratio - 4.0 / 9.0).abs() < 1e-15);
        assert!(memory_report(4, 4, 8).is_err());
    }
}
