//! Layers with dual execution paths and the toy sequence encoder built from
//! them.
//!
//! A [`QuantLinear`] in training mode runs fake quantization on the tape
//! (absmean ternary weights, per-token INT8 activations, straight-through
//! gradients). In inference mode it runs the packed integer kernel on a
//! ternary matrix produced from the master weight when the mode was switched.
//! Embeddings, normalization affine parameters, the connector and the output
//! heads are always full precision.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::linear_forward;
use crate::pack::PackedTernaryMatrix;
use crate::quant::{fake_quant_acts, fake_quant_weights, quantize_weights};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    LinearWeight,
    Bias,
    Embedding,
    NormGain,
    NormBias,
    Query,
}

/// A named trainable array. `group` is the unit of freezing.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// A tape plus the record of which parameter each leaf came from.
pub struct Graph {
    pub tape: Tape,
    frozen: Vec<String>,
    trainable: bool,
    bound: Vec<(String, Var)>,
}

impl Graph {
    /// Every parameter requires a gradient.
    pub fn train() -> Self {
        Self::with_frozen(&[])
    }

    /// Parameters in `frozen` groups enter the tape as constants.
    pub fn with_frozen(frozen: &[String]) -> Self {
        Self {
            tape: Tape::new(),
            frozen: frozen.to_vec(),
            trainable: true,
            bound: Vec::new(),
        }
    }

    /// No parameter requires a gradient.
    pub fn eval() -> Self {
        Self {
            trainable: false,
            ..Self::train()
        }
    }

    pub fn bind(&mut self, p: &Param) -> Var {
        let v = if self.trainable && !self.frozen.contains(&p.group) {
            self.tape.param(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound.push((p.name.clone(), v));
        v
    }

    /// Parameter-name → gradient for every bound parameter that received one.
    /// A parameter bound more than once gets the sum.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, var) in &self.bound {
            let Some(g) = grads.get(*var) else { continue };
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::matrix(rows, cols, data)
    }

    fn param(&mut self, name: String, group: &str, kind: ParamKind, rows: usize, cols: usize, std: f64) -> Param {
        let value = if std == 0.0 {
            Tensor::zeros(&[rows, cols])
        } else {
            self.normal(rows, cols, std)
        };
        Param {
            name,
            group: group.to_string(),
            kind,
            value,
        }
    }

    fn constant(name: String, group: &str, kind: ParamKind, rows: usize, cols: usize, v: f64) -> Param {
        Param {
            name,
            group: group.to_string(),
            kind,
            value: Tensor::full(&[rows, cols], v),
        }
    }
}

/// Anything that owns parameters and quantizable linears.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
    fn quant_linears(&self) -> Vec<&QuantLinear>;
    fn quant_linears_mut(&mut self) -> Vec<&mut QuantLinear>;

    /// Switching to inference packs every quantized linear from its current
    /// master weight.
    fn set_mode(&mut self, mode: Mode) -> Result<()> {
        for ql in self.quant_linears_mut() {
            ql.set_mode(mode)?;
        }
        Ok(())
    }

    fn mode(&self) -> Mode {
        if self.quant_linears().iter().any(|q| q.mode == Mode::Inference) {
            Mode::Inference
        } else {
            Mode::Training
        }
    }

    /// Parameters that are ternarized in the quantized model.
    fn quantized_param_names(&self) -> Vec<String> {
        self.quant_linears()
            .into_iter()
            .filter(|q| q.quantized)
            .map(|q| q.name.clone())
            .collect()
    }
}

/// Linear layer `y = x · Wᵀ` (no bias) with fake-quant and packed paths.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantLinear {
    pub name: String,
    pub group: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub quantized: bool,
    pub mode: Mode,
    /// Master `[out × in]` weight; absent for models loaded from an
    /// inference checkpoint.
    pub weight: Option<Param>,
    pub packed: Option<PackedTernaryMatrix>,
}

impl QuantLinear {
    pub fn new(init: &mut Init, name: &str, group: &str, in_dim: usize, out_dim: usize, quantized: bool, std: f64) -> Self {
        Self {
            name: name.to_string(),
            group: group.to_string(),
            in_dim,
            out_dim,
            quantized,
            mode: Mode::Training,
            weight: Some(init.param(name.to_string(), group, ParamKind::LinearWeight, out_dim, in_dim, std)),
            packed: None,
        }
    }

    fn master(&self) -> Result<&Param> {
        self.weight
            .as_ref()
            .ok_or_else(|| Error::contract(format!("{} has no full-precision master weight", self.name)))
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if !self.quantized {
            let w = g.bind(self.master()?);
            return g.tape.matmul_nt(x, w);
        }
        match self.mode {
            Mode::Training => {
                let w = g.bind(self.master()?);
                let wq = fake_quant_weights(&mut g.tape, w)?;
                let xq = fake_quant_acts(&mut g.tape, x)?;
                g.tape.matmul_nt(xq, wq)
            }
            Mode::Inference => {
                let packed = self
                    .packed
                    .as_ref()
                    .ok_or_else(|| Error::contract(format!("{} is not packed", self.name)))?;
                let y = linear_forward(packed, g.tape.value(x))?;
                Ok(g.tape.constant(y))
            }
        }
    }

    pub fn set_mode(&mut self, mode: Mode) -> Result<()> {
        if self.quantized {
            match mode {
                Mode::Inference => {
                    let q = quantize_weights(&self.master()?.value)?;
                    self.packed = Some(PackedTernaryMatrix::from_quant(&q)?);
                }
                Mode::Training => {
                    self.master()?;
                    self.packed = None;
                }
            }
        }
        self.mode = mode;
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param> {
        self.weight.iter().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.weight.iter_mut().collect()
    }
}

/// Full-precision affine layer `y = x · Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, group: &str, in_dim: usize, out_dim: usize, std: f64) -> Self {
        Self {
            weight: init.param(format!("{name}.weight"), group, ParamKind::LinearWeight, out_dim, in_dim, std),
            bias: Init::constant(format!("{name}.bias"), group, ParamKind::Bias, 1, out_dim, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.bind(&self.weight);
        let b = g.bind(&self.bias);
        let y = g.tape.matmul_nt(x, w)?;
        g.tape.add_row(y, b)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

impl LayerNorm {
    pub fn new(name: &str, group: &str, dim: usize) -> Self {
        Self {
            gain: Init::constant(format!("{name}.gain"), group, ParamKind::NormGain, 1, dim, 1.0),
            bias: Init::constant(format!("{name}.bias"), group, ParamKind::NormBias, 1, dim, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.tape.layernorm(x, LN_EPS);
        let gain = g.bind(&self.gain);
        let bias = g.bind(&self.bias);
        let y = g.tape.mul_row(n, gain)?;
        g.tape.add_row(y, bias)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gain, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// Pre-norm transformer block: causal self-attention then a GeLU MLP, each
/// wrapped in a residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub wq: QuantLinear,
    pub wk: QuantLinear,
    pub wv: QuantLinear,
    pub wo: QuantLinear,
    pub ln2: LayerNorm,
    pub up: QuantLinear,
    pub down: QuantLinear,
}

impl Block {
    pub fn new(init: &mut Init, name: &str, group: &str, dim: usize, heads: usize, mlp_ratio: usize, quantized: bool, depth: usize) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let hidden = dim * mlp_ratio;
        let out_std = std / (2.0 * depth as f64).sqrt();
        let mut ql = |suffix: &str, i: usize, o: usize, s: f64| {
            QuantLinear::new(init, &format!("{name}.{suffix}"), group, i, o, quantized, s)
        };
        let wq = ql("attn.q", dim, dim, std);
        let wk = ql("attn.k", dim, dim, std);
        let wv = ql("attn.v", dim, dim, std);
        let wo = ql("attn.o", dim, dim, out_std);
        let up = ql("mlp.up", dim, hidden, std);
        let down = ql("mlp.down", hidden, dim, out_std * (dim as f64 / hidden as f64).sqrt());
        Self {
            heads,
            ln1: LayerNorm::new(&format!("{name}.ln1"), group, dim),
            wq,
            wk,
            wv,
            wo,
            ln2: LayerNorm::new(&format!("{name}.ln2"), group, dim),
            up,
            down,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, seq_len: usize) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let q = self.wq.forward(g, h)?;
        let k = self.wk.forward(g, h)?;
        let v = self.wv.forward(g, h)?;
        let a = g.tape.causal_attention(q, k, v, self.heads, seq_len)?;
        let o = self.wo.forward(g, a)?;
        let x = g.tape.add(x, o)?;
        let h = self.ln2.forward(g, x)?;
        let u = self.up.forward(g, h)?;
        let u = g.tape.gelu(u);
        let d = self.down.forward(g, u)?;
        g.tape.add(x, d)
    }

    fn linears(&self) -> [&QuantLinear; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.up, &self.down]
    }

    fn linears_mut(&mut self) -> [&mut QuantLinear; 6] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.up, &mut self.down]
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.ln1.params();
        v.extend(self.ln2.params());
        v.extend(self.linears().into_iter().flat_map(QuantLinear::params));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let Self { ln1, ln2, wq, wk, wv, wo, up, down, .. } = self;
        let mut v = ln1.params_mut();
        v.extend(ln2.params_mut());
        for l in [wq, wk, wv, wo, up, down] {
            v.extend(l.params_mut());
        }
        v
    }

    pub fn quant_linears(&self) -> Vec<&QuantLinear> {
        self.linears().into_iter().collect()
    }

    pub fn quant_linears_mut(&mut self) -> Vec<&mut QuantLinear> {
        self.linears_mut().into_iter().collect()
    }
}

/// Two-layer GeLU MLP bridging encoder and decoder; always full precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Connector {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Connector {
    pub fn new(init: &mut Init, name: &str, group: &str, in_dim: usize, out_dim: usize) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), group, in_dim, out_dim, std),
            fc2: Linear::new(init, &format!("{name}.fc2"), group, out_dim, out_dim, 1.0 / (out_dim as f64).sqrt()),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.gelu(h);
        self.fc2.forward(g, h)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub quantized: bool,
    pub mlp_ratio: usize,
    /// Full-precision blocks after the connector (the frozen "language
    /// model" side during distillation).
    pub decoder_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 128,
            heads: 4,
            vocab: 256,
            max_seq: 64,
            quantized: false,
            mlp_ratio: 4,
            decoder_layers: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(m));
        if self.layers == 0 {
            return bad("encoder needs at least one layer".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.vocab == 0 || self.max_seq == 0 || self.mlp_ratio == 0 {
            return bad("vocab, max_seq and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Same architecture, differing only in the quantization flag.
    pub fn same_shape(&self, other: &Self) -> bool {
        Self {
            quantized: other.quantized,
            ..*self
        } == *other
    }
}

pub const GROUP_EMBED: &str = "embed";
pub const GROUP_ENCODER: &str = "encoder";
pub const GROUP_CONNECTOR: &str = "connector";
pub const GROUP_DECODER: &str = "decoder";
pub const GROUP_HEAD: &str = "head";

/// Token model used for the distillation task: embeddings, an encoder stack
/// (the part that gets quantized and distilled), a connector, a decoder stack
/// and a vocabulary head.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqModel {
    pub config: EncoderConfig,
    pub tok_embed: Param,
    pub pos_embed: Param,
    pub encoder: Vec<Block>,
    pub connector: Connector,
    pub decoder: Vec<Block>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

pub struct SeqOutput {
    pub logits: Var,
    /// Post-block residual streams of the encoder, one per layer.
    pub hiddens: Vec<Var>,
}

impl SeqModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let n = config.hidden;
        let depth = config.layers + config.decoder_layers;
        let tok_embed = init.param("embed.tok".into(), GROUP_EMBED, ParamKind::Embedding, config.vocab, n, 1.0);
        let pos_embed = init.param("embed.pos".into(), GROUP_EMBED, ParamKind::Embedding, config.max_seq, n, 1.0);
        let encoder = (0..config.layers)
            .map(|l| Block::new(&mut init, &format!("encoder.{l}"), GROUP_ENCODER, n, config.heads, config.mlp_ratio, config.quantized, depth))
            .collect();
        let connector = Connector::new(&mut init, "connector", GROUP_CONNECTOR, n, n);
        let decoder = (0..config.decoder_layers)
            .map(|l| Block::new(&mut init, &format!("decoder.{l}"), GROUP_DECODER, n, config.heads, config.mlp_ratio, false, depth))
            .collect();
        Ok(Self {
            config,
            tok_embed,
            pos_embed,
            encoder,
            connector,
            decoder,
            final_norm: LayerNorm::new("head.norm", GROUP_HEAD, n),
            head: Linear::new(&mut init, "head.out", GROUP_HEAD, n, config.vocab, 1.0 / (n as f64).sqrt()),
        })
    }

    /// Runs a batch of equal-length token sequences stacked along rows.
    pub fn forward(&self, g: &mut Graph, batch: &[Vec<usize>]) -> Result<SeqOutput> {
        let seq_len = batch.first().map_or(0, Vec::len);
        if seq_len == 0 || batch.iter().any(|s| s.len() != seq_len) {
            return Err(Error::contract("batch needs non-empty sequences of equal length"));
        }
        if seq_len > self.config.max_seq {
            return Err(Error::contract(format!(
                "sequence length {seq_len} exceeds max_seq {}",
                self.config.max_seq
            )));
        }
        let ids: Vec<usize> = batch.concat();
        let pos: Vec<usize> = (0..ids.len()).map(|i| i % seq_len).collect();
        let tok = g.bind(&self.tok_embed);
        let x = g.tape.gather_rows(tok, &ids)?;
        let pe = g.bind(&self.pos_embed);
        let p = g.tape.gather_rows(pe, &pos)?;
        let mut x = g.tape.add(x, p)?;
        let mut hiddens = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            x = block.forward(g, x, seq_len)?;
            hiddens.push(x);
        }
        let mut x = self.connector.forward(g, x)?;
        for block in &self.decoder {
            x = block.forward(g, x, seq_len)?;
        }
        let x = self.final_norm.forward(g, x)?;
        let logits = self.head.forward(g, x)?;
        Ok(SeqOutput { logits, hiddens })
    }

    /// Encoder hidden states `h^1..h^L` as plain tensors.
    pub fn encoder_hidden_states(&self, batch: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        let mut g = Graph::eval();
        let out = self.forward(&mut g, batch)?;
        Ok(out.hiddens.iter().map(|&h| g.tape.value(h).clone()).collect())
    }

    pub fn logits(&self, batch: &[Vec<usize>]) -> Result<Tensor> {
        let mut g = Graph::eval();
        let out = self.forward(&mut g, batch)?;
        Ok(g.tape.value(out.logits).clone())
    }
}

impl Module for SeqModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.tok_embed, &self.pos_embed];
        v.extend(self.encoder.iter().flat_map(Block::params));
        v.extend(self.connector.params());
        v.extend(self.decoder.iter().flat_map(Block::params));
        v.extend(self.final_norm.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.tok_embed, &mut self.pos_embed];
        v.extend(self.encoder.iter_mut().flat_map(Block::params_mut));
        v.extend(self.connector.params_mut());
        v.extend(self.decoder.iter_mut().flat_map(Block::params_mut));
        v.extend(self.final_norm.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    fn quant_linears(&self) -> Vec<&QuantLinear> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(Block::quant_linears)
            .collect()
    }

    fn quant_linears_mut(&mut self) -> Vec<&mut QuantLinear> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(Block::quant_linears_mut)
            .collect()
    }
}
