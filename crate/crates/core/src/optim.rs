//! First-order optimizers over named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Momentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimKind::Momentum,
            lr: 0.01,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimKind::Adam,
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

/// Euclidean norm over every gradient.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that has a gradient, in model order.
    /// Parameters without a gradient (frozen ones) are left untouched.
    /// Returns the pre-clip gradient norm.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm"));
        }
        let c = self.config;
        let scale = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        for p in model.params_mut() {
            let Some(g) = grads.get(&p.name) else { continue };
            if g.len() != p.value.len() {
                return Err(Error::shape("optimizer step", p.value.shape(), g.shape()));
            }
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            match c.kind {
                OptimKind::Momentum => {
                    for ((w, mi), gi) in p.value.data_mut().iter_mut().zip(m.iter_mut()).zip(g.data()) {
                        *mi = c.momentum * *mi + gi * scale;
                        *w -= c.lr * *mi;
                    }
                }
                OptimKind::Adam => {
                    let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    for (((w, mi), vi), gi) in p.value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        let g = gi * scale;
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                        *w -= c.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{EncoderConfig, SeqModel};

    fn model() -> SeqModel {
        SeqModel::new(
            EncoderConfig {
                hidden: 8,
                heads: 2,
                vocab: 8,
                max_seq: 4,
                layers: 1,
                mlp_ratio: 1,
                ..EncoderConfig::default()
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn momentum_first_step_is_sgd() {
        let mut m = model();
        let before = m.head.bias.value.clone();
        let mut grads = BTreeMap::new();
        grads.insert("head.out.bias".to_string(), Tensor::full(before.shape(), 0.5));
        let cfg = OptimConfig { clip_norm: 0.0, lr: 0.1, ..OptimConfig::default() };
        let mut opt = Optimizer::new(cfg).unwrap();
        opt.step(&mut m, &grads).unwrap();
        for (a, b) in m.head.bias.value.data().iter().zip(before.data()) {
            assert!((b - a - 0.05).abs() < 1e-15);
        }
        let snapshot = m.tok_embed.value.clone();
        opt.step(&mut m, &grads).unwrap();
        assert_eq!(m.tok_embed.value, snapshot);
    }

    #[test]
    fn clipping_bounds_update() {
        let mut m = model();
        let before = m.head.bias.value.clone();
        let mut grads = BTreeMap::new();
        grads.insert("head.out.bias".to_string(), Tensor::full(before.shape(), 100.0));
        let cfg = OptimConfig { clip_norm: 1.0, lr: 1.0, ..OptimConfig::default() };
        Optimizer::new(cfg).unwrap().step(&mut m, &grads).unwrap();
        let delta: f64 = m
            .head
            .bias
            .value
            .data()
            .iter()
            .zip(before.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((delta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut m = model();
        let before = m.head.bias.value.clone();
        let mut grads = BTreeMap::new();
        grads.insert("head.out.bias".to_string(), Tensor::full(before.shape(), -3.0));
        let cfg = OptimConfig { clip_norm: 0.0, ..OptimConfig::adam(0.01) };
        Optimizer::new(cfg).unwrap().step(&mut m, &grads).unwrap();
        for (a, b) in m.head.bias.value.data().iter().zip(before.data()) {
            assert!((a - b - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut m = model();
        let mut grads = BTreeMap::new();
        grads.insert("head.out.bias".to_string(), Tensor::full(&[1, 8], f64::NAN));
        let mut opt = Optimizer::new(OptimConfig::default()).unwrap();
        assert!(opt.step(&mut m, &grads).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(Optimizer::new(OptimConfig { lr: -1.0, ..OptimConfig::default() }).is_err());
        assert!(Optimizer::new(OptimConfig { momentum: 1.0, ..OptimConfig::default() }).is_err());
    }
}
