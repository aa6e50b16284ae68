//! Quantizer laws over 10,000 random cases each.

use proptest::prelude::*;
use tern_core::quant::ACT_LEVELS;
use tern_core::{fake_quant_acts, fake_quant_weights, quantize_acts, quantize_weights, round_clip, Tape, Tensor};

const CASES: u32 = 10_000;

/// Matrices with entries in `[-4, 4]` and at least one entry of magnitude
/// above `0.1`, so no scale hits the epsilon clamp.
fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..24).prop_flat_map(|(r, c)| {
        (prop::collection::vec(-4.0f64..4.0, r * c), 0..r * c).prop_map(move |(mut v, i)| {
            if v[i].abs() < 0.1 {
                v[i] = 0.5;
            }
            // Every token row also needs a non-negligible entry.
            for row in v.chunks_mut(c) {
                if row.iter().all(|x| x.abs() < 0.1) {
                    row[0] = -0.75;
                }
            }
            Tensor::matrix(r, c, v)
        })
    })
}

fn pow2() -> impl Strategy<Value = f64> {
    (-12i32..=12).prop_map(|k| 2f64.powi(k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn weight_codes_invariant_under_pow2_scale(w in matrix(), s in pow2()) {
        let a = quantize_weights(&w).unwrap();
        let b = quantize_weights(&w.map(|v| v * s)).unwrap();
        prop_assert_eq!(&a.codes, &b.codes);
        prop_assert_eq!(a.alpha * s, b.alpha);
    }

    #[test]
    fn act_codes_invariant_under_pow2_scale(x in matrix(), s in pow2()) {
        let a = quantize_acts(&x).unwrap();
        let b = quantize_acts(&x.map(|v| v * s)).unwrap();
        prop_assert_eq!(&a.codes, &b.codes);
        for (p, q) in a.beta.iter().zip(&b.beta) {
            prop_assert_eq!(p * s, *q);
        }
    }

    #[test]
    fn codes_stay_in_domain(x in matrix()) {
        let w = quantize_weights(&x).unwrap();
        prop_assert!(w.codes.iter().all(|c| (-1..=1).contains(c)));
        let a = quantize_acts(&x).unwrap();
        // -128 is never produced: |x| <= beta maps into [-127, 127].
        prop_assert!(a.codes.iter().all(|c| (-127..=127).contains(c)));
    }

    #[test]
    fn act_dequant_within_half_step(x in matrix()) {
        let q = quantize_acts(&x).unwrap();
        let d = q.dequantize();
        for t in 0..q.tokens {
            let half = q.beta[t] / ACT_LEVELS / 2.0;
            for (orig, back) in x.row(t).iter().zip(d.row(t)) {
                prop_assert!((orig - back).abs() <= half * (1.0 + 1e-12), "{} vs {} half-step {}", orig, back, half);
            }
        }
    }

    #[test]
    fn fake_quant_forward_is_the_quantizer(x in matrix()) {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let a = fake_quant_acts(&mut tape, v).unwrap();
        let w = fake_quant_weights(&mut tape, v).unwrap();
        let (qa, qw) = (quantize_acts(&x).unwrap().dequantize(), quantize_weights(&x).unwrap().dequantize());
        prop_assert_eq!(tape.value(a).data(), qa.data());
        prop_assert_eq!(tape.value(w).data(), qw.data());
    }

    #[test]
    fn round_clip_is_monotone_and_bounded(a in -300.0f64..300.0, b in -300.0f64..300.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (ql, qh) = (round_clip(lo, -128, 127).unwrap(), round_clip(hi, -128, 127).unwrap());
        prop_assert!(ql <= qh);
        prop_assert!((-128..=127).contains(&ql) && (-128..=127).contains(&qh));
    }
}

/// STE backward hands the upstream gradient through unchanged, bit for bit.
#[test]
fn ste_backward_is_identity() {
    let x = Tensor::matrix(2, 3, vec![0.3, -1.2, 2.5, 0.01, -0.4, 0.9]);
    let up = Tensor::matrix(2, 3, vec![1.5, -2.0, 0.25, 3.0, -0.125, 7.0]);
    let mut tape = Tape::new();
    let v = tape.param(x);
    let a = fake_quant_acts(&mut tape, v).unwrap();
    let w = fake_quant_weights(&mut tape, a).unwrap();
    let c = tape.constant(up.clone());
    let p = tape.mul(w, c).unwrap();
    let loss = tape.sum(p);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(v).unwrap().data(), up.data());
}
