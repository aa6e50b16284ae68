//! Training objectives as tape-compatible scalar losses.
//!
//! `lambda` weights the hidden-state alignment term against the task loss.
//! Experiment write-ups sometimes call the same weight `gamma`; this crate
//! uses a single field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::contract(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
        }
    }
}

/// Mean next-token NLL over answer positions only.
pub fn lm_loss(tape: &mut Tape, logits: Var, targets: &[usize], answer_mask: &[bool]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, targets, answer_mask)
}

/// Mean over layers of the per-token, per-dimension squared distance between
/// teacher and student hidden states. Teacher states are detached, so no
/// gradient ever reaches them.
pub fn aux_loss(tape: &mut Tape, teacher: &[Var], student: &[Var]) -> Result<Var> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(Error::shape("aux_loss", &[teacher.len()], &[student.len()]));
    }
    let mut terms = Vec::with_capacity(teacher.len());
    for (&t, &s) in teacher.iter().zip(student) {
        if tape.value(t).shape() != tape.value(s).shape() {
            return Err(Error::shape("aux_loss", tape.value(t).shape(), tape.value(s).shape()));
        }
        let t = tape.detach(t);
        let d = tape.sub(s, t)?;
        let sq = tape.mul(d, d)?;
        terms.push(tape.mean(sq));
    }
    let mut acc = terms[0];
    for &term in &terms[1..] {
        acc = tape.add(acc, term)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

/// `lm + lambda * aux`. With `lambda == 0` the task loss node itself is
/// returned.
pub fn total_loss(tape: &mut Tape, lm: Var, aux: Var, w: LossWeights) -> Result<Var> {
    if w.lambda == 0.0 {
        return Ok(lm);
    }
    let weighted = tape.scale(aux, w.lambda);
    tape.add(lm, weighted)
}

/// Sum over chunk steps of the per-step L1 error.
pub fn action_l1_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    if tape.value(pred).shape() != target.shape() {
        return Err(Error::shape("action_l1_loss", tape.value(pred).shape(), target.shape()));
    }
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let a = tape.abs(d);
    Ok(tape.sum(a))
}

/// [`action_l1_loss`] over `batch` stacked chunks, averaged over the batch.
pub fn action_l1_loss_batch(tape: &mut Tape, pred: Var, target: &Tensor, batch: usize) -> Result<Var> {
    let total = action_l1_loss(tape, pred, target)?;
    Ok(tape.scale(total, 1.0 / batch.max(1) as f64))
}

/// Plain-value form of one [`aux_loss`] layer term.
pub fn hidden_mse(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    s / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_validation() {
        assert!(LossWeights::new(-0.1).is_err());
        assert!(LossWeights::new(f64::NAN).is_err());
        assert_eq!(LossWeights::default().lambda, 0.1);
    }

    #[test]
    fn lm_perfect_and_uniform() {
        let mut tape = Tape::new();
        let mut big = vec![0.0; 2 * 256];
        big[7] = 1e4;
        big[256 + 9] = 1e4;
        let l = tape.constant(Tensor::matrix(2, 256, big));
        let loss = lm_loss(&mut tape, l, &[7, 9], &[true, true]).unwrap();
        assert!(tape.value(loss).item() < 1e-12);
        let u = tape.constant(Tensor::zeros(&[3, 256]));
        let loss = lm_loss(&mut tape, u, &[1, 2, 3], &[true, false, true]).unwrap();
        assert!((tape.value(loss).item() - 256f64.ln()).abs() < 1e-12);
        assert!((256f64.ln() - 5.545).abs() < 1e-3);
    }

    #[test]
    fn masked_target_does_not_matter() {
        let logits = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let eval = |targets: &[usize]| {
            let mut tape = Tape::new();
            let l = tape.constant(logits.clone());
            let v = lm_loss(&mut tape, l, targets, &[true, false, true]).unwrap();
            tape.value(v).item()
        };
        assert_eq!(eval(&[0, 1, 2]), eval(&[0, 3, 2]));
    }

    #[test]
    fn aux_examples() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]));
        let s = tape.param(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        let a = aux_loss(&mut tape, &[t], &[s]).unwrap();
        assert_eq!(tape.value(a).item(), 1.0);
        let same = aux_loss(&mut tape, &[t], &[t]).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        let dup = aux_loss(&mut tape, &[t, t], &[s, s]).unwrap();
        assert_eq!(tape.value(dup).item(), 1.0);
    }

    #[test]
    fn aux_shape_mismatch() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::zeros(&[1, 2]));
        let s = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(aux_loss(&mut tape, &[t], &[s]).is_err());
        assert!(aux_loss(&mut tape, &[t, t], &[t]).is_err());
    }

    #[test]
    fn aux_never_reaches_teacher() {
        let mut tape = Tape::new();
        let t = tape.param(Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]));
        let s = tape.param(Tensor::matrix(2, 2, vec![0.0, 0.3, -0.2, 1.0]));
        let a = aux_loss(&mut tape, &[t], &[s]).unwrap();
        let g = tape.backward(a).unwrap();
        assert!(g.get(t).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(g.get(s).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn total_examples() {
        let mut tape = Tape::new();
        let lm = tape.constant(Tensor::scalar(2.0));
        let aux = tape.constant(Tensor::scalar(1.0));
        let t = total_loss(&mut tape, lm, aux, LossWeights::new(0.1).unwrap()).unwrap();
        assert!((tape.value(t).item() - 2.1).abs() < 1e-15);
        let t0 = total_loss(&mut tape, lm, aux, LossWeights::new(0.0).unwrap()).unwrap();
        assert_eq!(tape.value(t0).item().to_bits(), 2.0f64.to_bits());
    }

    #[test]
    fn l1_examples() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::matrix(1, 2, vec![1.0, -1.0]));
        let l = action_l1_loss(&mut tape, p, &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
        let exact = action_l1_loss(&mut tape, p, &Tensor::matrix(1, 2, vec![1.0, -1.0])).unwrap();
        assert_eq!(tape.value(exact).item(), 0.0);
        assert!(action_l1_loss(&mut tape, p, &Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn l1_permutation_symmetry() {
        let pred = [0.3, -0.8, 1.2, 0.1, 0.0, -0.4];
        let target = [0.1, 0.2, -0.3, 0.5, 0.9, -1.0];
        let eval = |p: Vec<f64>, t: Vec<f64>| {
            let mut tape = Tape::new();
            let pv = tape.param(Tensor::matrix(2, 3, p));
            let l = action_l1_loss(&mut tape, pv, &Tensor::matrix(2, 3, t)).unwrap();
            tape.value(l).item()
        };
        let perm = |v: &[f64]| vec![v[2], v[0], v[1], v[5], v[3], v[4]];
        let a = eval(pred.to_vec(), target.to_vec());
        let b = eval(perm(&pred), perm(&target));
        assert!((a - b).abs() < 1e-15);
    }
}
