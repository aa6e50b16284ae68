//! Absmean ternary weight quantization, per-token absmax INT8 activation
//! quantization, and their fake-quant (straight-through) tape forms.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Lower clamp on `alpha` and `beta`; all-zero inputs quantize to all-zero codes.
pub const SCALE_EPS: f64 = 1e-5;

pub const ACT_LEVELS: f64 = 127.0;

/// Round to nearest (ties away from zero), then clamp to `[lo, hi]`.
pub fn round_clip(x: f64, lo: i32, hi: i32) -> Result<i32> {
    if lo > hi {
        return Err(Error::contract(format!("round_clip bounds {lo} > {hi}")));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("round_clip input"));
    }
    // f64::round already rounds half away from zero.
    Ok(x.round().clamp(lo as f64, hi as f64) as i32)
}

#[inline]
fn round_clip_unchecked(x: f64, lo: f64, hi: f64) -> i8 {
    x.round().clamp(lo, hi) as i8
}

/// Ternary codes for one weight matrix plus its absmean scale.
#[derive(Clone, Debug, PartialEq)]
pub struct TernaryQuant {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i8>,
    pub alpha: f64,
}

impl TernaryQuant {
    pub fn dequantize(&self) -> Tensor {
        Tensor::matrix(
            self.rows,
            self.cols,
            self.codes.iter().map(|&c| self.alpha * c as f64).collect(),
        )
    }

    pub fn row(&self, i: usize) -> &[i8] {
        &self.codes[i * self.cols..(i + 1) * self.cols]
    }
}

/// Per-token INT8 codes with one absmax scale per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Int8Acts {
    pub tokens: usize,
    pub dim: usize,
    pub codes: Vec<i8>,
    pub beta: Vec<f64>,
}

impl Int8Acts {
    pub fn token(&self, t: usize) -> &[i8] {
        &self.codes[t * self.dim..(t + 1) * self.dim]
    }

    pub fn dequantize(&self) -> Tensor {
        let mut out = Vec::with_capacity(self.codes.len());
        for t in 0..self.tokens {
            let step = self.beta[t] / ACT_LEVELS;
            out.extend(self.token(t).iter().map(|&c| c as f64 * step));
        }
        Tensor::matrix(self.tokens, self.dim, out)
    }
}

pub(crate) fn check_finite(t: &Tensor, what: &'static str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `alpha = max(mean|W|, eps)`, `codes = RoundClip(W / alpha, -1, 1)`.
pub fn quantize_weights(w: &Tensor) -> Result<TernaryQuant> {
    check_finite(w, "weights")?;
    let (rows, cols) = w.dims2();
    let l1: f64 = w.data().iter().map(|v| v.abs()).sum();
    let alpha = (l1 / w.len() as f64).max(SCALE_EPS);
    let codes = w
        .data()
        .iter()
        .map(|&v| round_clip_unchecked(v / alpha, -1.0, 1.0))
        .collect();
    Ok(TernaryQuant {
        rows,
        cols,
        codes,
        alpha,
    })
}

/// Quantizes one token in place into `codes`, returning its `beta`.
///
/// This is the single definition of the activation quantizer shared by the
/// fake-quant path and the integer kernel, so the two produce identical codes.
#[inline]
pub fn quantize_token(x: &[f64], codes: &mut [i8]) -> f64 {
    let beta = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(SCALE_EPS);
    let inv = ACT_LEVELS / beta;
    for (c, &v) in codes.iter_mut().zip(x) {
        *c = round_clip_unchecked(v * inv, -128.0, 127.0);
    }
    beta
}

/// Per-row `beta = max(|x|, eps)`, `codes = RoundClip(127 x / beta, -128, 127)`.
pub fn quantize_acts(x: &Tensor) -> Result<Int8Acts> {
    check_finite(x, "activations")?;
    let (tokens, dim) = x.dims2();
    let mut codes = vec![0i8; tokens * dim];
    let beta = (0..tokens)
        .map(|t| quantize_token(x.row(t), &mut codes[t * dim..(t + 1) * dim]))
        .collect();
    Ok(Int8Acts {
        tokens,
        dim,
        codes,
        beta,
    })
}

/// Forward: `alpha * Q_w(W)`. Backward: identity to `W`.
pub fn fake_quant_weights(tape: &mut Tape, w: Var) -> Result<Var> {
    let q = quantize_weights(tape.value(w))?.dequantize();
    let q = q.reshape(tape.value(w).shape())?;
    tape.ste_passthrough(w, q)
}

/// Forward: `(beta / 127) * Q_a(x)` per token. Backward: identity to `x`.
pub fn fake_quant_acts(tape: &mut Tape, x: Var) -> Result<Var> {
    let q = quantize_acts(tape.value(x))?.dequantize();
    let q = q.reshape(tape.value(x).shape())?;
    tape.ste_passthrough(x, q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_clip_examples() {
        assert_eq!(round_clip(0.4, -1, 1).unwrap(), 0);
        assert_eq!(round_clip(2.0, -1, 1).unwrap(), 1);
        assert_eq!(round_clip(-63.5, -128, 127).unwrap(), -64);
        assert_eq!(round_clip(63.5, -128, 127).unwrap(), 64);
        assert_eq!(round_clip(-1000.0, -128, 127).unwrap(), -128);
    }

    #[test]
    fn round_clip_contract() {
        assert!(matches!(round_clip(f64::NAN, -1, 1), Err(Error::NonFinite(_))));
        assert!(matches!(round_clip(f64::INFINITY, -1, 1), Err(Error::NonFinite(_))));
        assert!(matches!(round_clip(0.0, 1, -1), Err(Error::Contract(_))));
    }

    #[test]
    fn weights_already_ternary() {
        let w = Tensor::from_rows(&[vec![1.0, -1.0], vec![1.0, 1.0]]).unwrap();
        let q = quantize_weights(&w).unwrap();
        assert_eq!(q.alpha, 1.0);
        assert_eq!(q.codes, vec![1, -1, 1, 1]);
    }

    #[test]
    fn weights_absmean_example() {
        let w = Tensor::from_rows(&[vec![0.3, -0.6], vec![0.9, 0.0]]).unwrap();
        let q = quantize_weights(&w).unwrap();
        assert!((q.alpha - 0.45).abs() < 1e-15);
        assert_eq!(q.codes, vec![1, -1, 1, 0]);
    }

    #[test]
    fn zero_weights_hit_epsilon_guard() {
        let q = quantize_weights(&Tensor::zeros(&[3, 4])).unwrap();
        assert_eq!(q.alpha, SCALE_EPS);
        assert!(q.codes.iter().all(|&c| c == 0));
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let w = Tensor::matrix(1, 2, vec![1.0, f64::NAN]);
        assert!(quantize_weights(&w).is_err());
        assert!(quantize_acts(&w).is_err());
    }

    #[test]
    fn acts_example_rounds_away() {
        let x = Tensor::matrix(1, 3, vec![0.5, -1.0, 0.25]);
        let q = quantize_acts(&x).unwrap();
        assert_eq!(q.beta, vec![1.0]);
        assert_eq!(q.codes, vec![64, -127, 32]);
    }

    #[test]
    fn acts_symmetric_pair() {
        for c in [0.001, 0.5, 3.0, 1e4] {
            let q = quantize_acts(&Tensor::matrix(1, 2, vec![c, -c])).unwrap();
            assert_eq!(q.codes, vec![127, -127]);
        }
    }

    #[test]
    fn zero_acts_hit_epsilon_guard() {
        let q = quantize_acts(&Tensor::zeros(&[2, 5])).unwrap();
        assert_eq!(q.beta, vec![SCALE_EPS; 2]);
        assert!(q.codes.iter().all(|&c| c == 0));
    }

    #[test]
    fn beta_is_per_row() {
        let x = Tensor::from_rows(&[vec![1.0, 0.5], vec![4.0, -8.0]]).unwrap();
        let q = quantize_acts(&x).unwrap();
        assert_eq!(q.beta, vec![1.0, 8.0]);
        assert_eq!(q.token(1), &[64, -127]);
    }

    #[test]
    fn fake_quant_acts_extreme_maps_to_beta() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(1, 3, vec![0.3, -2.5, 1.1]));
        let y = fake_quant_acts(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data()[1], -2.5);
    }

    #[test]
    fn fake_quant_weights_forward_is_dequantized() {
        let w = Tensor::from_rows(&[vec![0.3, -0.6], vec![0.9, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(w.clone());
        let y = fake_quant_weights(&mut tape, v).unwrap();
        let q = quantize_weights(&w).unwrap();
        assert_eq!(tape.value(y).data(), q.dequantize().data());
    }
}
