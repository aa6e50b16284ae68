//! Chunked action policy for the point-reach task.
//!
//! Sequence per sample: image patch tokens, one state token, instruction
//! tokens, then `h+1` learned action queries. The quantizable transformer
//! blocks run causally over it; a full-precision head maps the query rows to
//! the `h+1` actions of the chunk, so a whole chunk costs one forward pass.
//! The same backbone can be pretrained autoregressively on 256-bin action
//! tokens.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
pub use crate::data::{ActionChunk, Observation};
use crate::data::{gen_reach_dataset, ReachConfig, ReachEnv, TrajectoryDataset, TrajectoryRecord, ACTION_DIM, INSTR_LEN, STATE_DIM};
use crate::distill::BatchSampler;
use crate::error::{Error, Result};
use crate::loss::{action_l1_loss_batch, lm_loss};
use crate::nn::{Block, Graph, Init, LayerNorm, Linear, Mode, Module, Param, ParamKind, QuantLinear};
use crate::optim::{OptimConfig, Optimizer};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const BINS: usize = 256;

/// Per-dimension uniform binning over a calibrated `[min, max]` range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionCodec {
    pub ranges: Vec<(f64, f64)>,
}

impl ActionCodec {
    pub fn new(ranges: Vec<(f64, f64)>) -> Result<Self> {
        if ranges.is_empty() || ranges.iter().any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
            return Err(Error::contract("codec ranges need finite min < max per dimension"));
        }
        Ok(Self { ranges })
    }

    pub fn dims(&self) -> usize {
        self.ranges.len()
    }

    pub fn width(&self, d: usize) -> f64 {
        let (lo, hi) = self.ranges[d];
        (hi - lo) / BINS as f64
    }

    /// `clamp(floor((a - min) / width), 0, 255)` per dimension.
    pub fn encode(&self, a: &[f64]) -> Result<Vec<u8>> {
        if a.len() != self.dims() {
            return Err(Error::shape("encode_action", &[self.dims()], &[a.len()]));
        }
        a.iter()
            .enumerate()
            .map(|(d, &v)| {
                if !v.is_finite() {
                    return Err(Error::NonFinite("action"));
                }
                let bin = ((v - self.ranges[d].0) / self.width(d)).floor();
                Ok(bin.clamp(0.0, (BINS - 1) as f64) as u8)
            })
            .collect()
    }

    /// Bin centers `min + (bin + 0.5) * width`.
    pub fn decode(&self, bins: &[usize]) -> Result<Vec<f64>> {
        if bins.len() != self.dims() {
            return Err(Error::shape("decode_action", &[self.dims()], &[bins.len()]));
        }
        bins.iter()
            .enumerate()
            .map(|(d, &b)| {
                if b >= BINS {
                    return Err(Error::contract(format!("bin {b} out of range")));
                }
                Ok(self.ranges[d].0 + (b as f64 + 0.5) * self.width(d))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub quantized: bool,
    pub grid: usize,
    pub patch: usize,
    /// Maximum number of action queries (`h + 1`).
    pub chunk_capacity: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
            quantized: true,
            grid: 16,
            patch: 4,
            chunk_capacity: 25,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) || self.mlp_ratio == 0 {
            return Err(Error::contract("invalid policy backbone shape"));
        }
        if self.patch == 0 || !self.grid.is_multiple_of(self.patch) {
            return Err(Error::contract("grid must be a multiple of patch"));
        }
        if self.chunk_capacity == 0 {
            return Err(Error::contract("chunk_capacity must be positive"));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.grid / self.patch).pow(2)
    }

    /// Tokens before the action queries.
    pub fn prefix_len(&self) -> usize {
        self.patches() + 1 + INSTR_LEN
    }

    fn max_positions(&self) -> usize {
        self.prefix_len() + self.chunk_capacity * ACTION_DIM
    }

    fn instr_vocab(&self) -> usize {
        2 * self.grid
    }
}

pub const GROUP_OBS: &str = "obs";
pub const GROUP_BACKBONE: &str = "encoder";
pub const GROUP_QUERIES: &str = "queries";
pub const GROUP_ACTION_HEAD: &str = "action_head";
pub const GROUP_AR: &str = "ar";

#[derive(Debug)]
pub struct PolicyModel {
    pub config: PolicyConfig,
    pub patch_proj: Linear,
    pub state_proj: Linear,
    pub instr_embed: Param,
    pub pos_embed: Param,
    pub queries: Param,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub action_head: Linear,
    pub ar_embed: Param,
    pub ar_head: Linear,
    forward_calls: AtomicU64,
}

impl Clone for PolicyModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            patch_proj: self.patch_proj.clone(),
            state_proj: self.state_proj.clone(),
            instr_embed: self.instr_embed.clone(),
            pos_embed: self.pos_embed.clone(),
            queries: self.queries.clone(),
            blocks: self.blocks.clone(),
            final_norm: self.final_norm.clone(),
            action_head: self.action_head.clone(),
            ar_embed: self.ar_embed.clone(),
            ar_head: self.ar_head.clone(),
            forward_calls: AtomicU64::new(self.forward_calls()),
        }
    }
}

fn param(init: &mut Init, name: &str, group: &str, kind: ParamKind, rows: usize, cols: usize, std: f64) -> Param {
    Param {
        name: name.to_string(),
        group: group.to_string(),
        kind,
        value: init.normal(rows, cols, std),
    }
}

impl PolicyModel {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let n = config.hidden;
        let pp = config.patch * config.patch;
        let blocks = (0..config.layers)
            .map(|l| Block::new(&mut init, &format!("encoder.{l}"), GROUP_BACKBONE, n, config.heads, config.mlp_ratio, config.quantized, config.layers))
            .collect();
        let mut action_head = Linear::new(&mut init, "action_head.out", GROUP_ACTION_HEAD, n, ACTION_DIM, 1.0);
        action_head.weight.value = Tensor::zeros(&[ACTION_DIM, n]);
        Ok(Self {
            config,
            patch_proj: Linear::new(&mut init, "obs.patch", GROUP_OBS, pp, n, 1.0 / (pp as f64).sqrt()),
            state_proj: Linear::new(&mut init, "obs.state", GROUP_OBS, STATE_DIM, n, 1.0),
            instr_embed: param(&mut init, "obs.instr", GROUP_OBS, ParamKind::Embedding, config.instr_vocab(), n, 1.0),
            pos_embed: param(&mut init, "obs.pos", GROUP_OBS, ParamKind::Embedding, config.max_positions(), n, 1.0),
            queries: param(&mut init, "queries", GROUP_QUERIES, ParamKind::Query, config.chunk_capacity, n, 1.0),
            blocks,
            final_norm: LayerNorm::new("action_head.norm", GROUP_ACTION_HEAD, n),
            action_head,
            ar_embed: param(&mut init, "ar.embed", GROUP_AR, ParamKind::Embedding, BINS, n, 1.0),
            ar_head: Linear::new(&mut init, "ar.out", GROUP_AR, n, BINS, 1.0 / (n as f64).sqrt()),
            forward_calls: AtomicU64::new(0),
        })
    }

    /// Number of per-sample backbone passes made for chunk prediction.
    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// Observation tokens stacked by kind: all patches, then all states, then
    /// all instruction tokens. Returns the rows and the batch size.
    fn embed_prefix(&self, g: &mut Graph, obs: &[&Observation]) -> Result<(Var, usize)> {
        let c = &self.config;
        let (grid, patch) = (c.grid, c.patch);
        let per_side = grid / patch;
        let mut pixels = Vec::with_capacity(obs.len() * grid * grid);
        let mut states = Vec::with_capacity(obs.len() * STATE_DIM);
        let mut instr = Vec::with_capacity(obs.len() * INSTR_LEN);
        for o in obs {
            if o.image.len() != grid * grid {
                return Err(Error::shape("observation image", &[grid, grid], &[o.image.len()]));
            }
            if o.state.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("observation state"));
            }
            for py in 0..per_side {
                for px in 0..per_side {
                    for y in 0..patch {
                        let row = (py * patch + y) * grid + px * patch;
                        pixels.extend(o.image[row..row + patch].iter().map(|&v| v as f64 / 255.0));
                    }
                }
            }
            states.extend(o.state);
            for &t in &o.instruction {
                if t as usize >= c.instr_vocab() {
                    return Err(Error::contract(format!("instruction token {t} out of range")));
                }
                instr.push(t as usize);
            }
        }
        let b = obs.len();
        let px = g.tape.constant(Tensor::matrix(b * c.patches(), patch * patch, pixels));
        let px = self.patch_proj.forward(g, px)?;
        let st = g.tape.constant(Tensor::matrix(b, STATE_DIM, states));
        let st = self.state_proj.forward(g, st)?;
        let table = g.bind(&self.instr_embed);
        let it = g.tape.gather_rows(table, &instr)?;
        Ok((g.tape.concat_rows(&[px, st, it])?, b))
    }

    /// Runs prefix + `suffix` (one `[B·s × n]` block, sample-major) through
    /// the backbone and returns the normalized hidden rows `[B·T × n]`.
    fn backbone(&self, g: &mut Graph, prefix: Var, suffix: Option<Var>, b: usize, s: usize) -> Result<(Var, usize)> {
        let c = &self.config;
        let (np, pl) = (c.patches(), c.prefix_len());
        let t = pl + s;
        if t > c.max_positions() {
            return Err(Error::contract("sequence exceeds positional capacity"));
        }
        // Stacked rows: [patches of all samples][states][instructions][suffix].
        let state_base = b * np;
        let instr_base = state_base + b;
        let suffix_base = instr_base + b * INSTR_LEN;
        let mut order = Vec::with_capacity(b * t);
        for i in 0..b {
            order.extend(i * np..(i + 1) * np);
            order.push(state_base + i);
            order.extend(instr_base + i * INSTR_LEN..instr_base + (i + 1) * INSTR_LEN);
            order.extend(suffix_base + i * s..suffix_base + (i + 1) * s);
        }
        let stacked = match suffix {
            Some(sfx) => g.tape.concat_rows(&[prefix, sfx])?,
            None => prefix,
        };
        let x = g.tape.gather_rows(stacked, &order)?;
        let pe = g.bind(&self.pos_embed);
        let pos: Vec<usize> = (0..b * t).map(|r| r % t).collect();
        let p = g.tape.gather_rows(pe, &pos)?;
        let mut x = g.tape.add(x, p)?;
        for block in &self.blocks {
            x = block.forward(g, x, t)?;
        }
        Ok((self.final_norm.forward(g, x)?, t))
    }

    /// Predicted chunks for a batch, `[B·(h+1) × d]`, in one backbone pass.
    pub fn forward_chunks(&self, g: &mut Graph, obs: &[&Observation], horizon: usize) -> Result<Var> {
        let q = horizon + 1;
        if q > self.config.chunk_capacity {
            return Err(Error::contract(format!(
                "horizon {horizon} needs {q} queries, capacity is {}",
                self.config.chunk_capacity
            )));
        }
        if obs.is_empty() {
            return Err(Error::contract("empty observation batch"));
        }
        let (prefix, b) = self.embed_prefix(g, obs)?;
        let table = g.bind(&self.queries);
        let idx: Vec<usize> = (0..b).flat_map(|_| 0..q).collect();
        let queries = g.tape.gather_rows(table, &idx)?;
        let (h, t) = self.backbone(g, prefix, Some(queries), b, q)?;
        let rows: Vec<usize> = (0..b).flat_map(|i| (t - q..t).map(move |j| i * t + j)).collect();
        let h = g.tape.gather_rows(h, &rows)?;
        let out = self.action_head.forward(g, h)?;
        self.forward_calls.fetch_add(b as u64, Ordering::Relaxed);
        Ok(out)
    }

    /// Next-token logits over action bins, `[B·T × 256]`, plus the mask of
    /// rows that predict an action token and their targets.
    pub fn forward_ar(&self, g: &mut Graph, obs: &[&Observation], tokens: &[Vec<usize>]) -> Result<(Var, Vec<usize>, Vec<bool>)> {
        let k = tokens.first().map_or(0, Vec::len);
        if k == 0 || tokens.len() != obs.len() || tokens.iter().any(|t| t.len() != k) {
            return Err(Error::contract("action token batch must be non-empty and rectangular"));
        }
        let (prefix, b) = self.embed_prefix(g, obs)?;
        let table = g.bind(&self.ar_embed);
        // Teacher forcing: every action token except the last is an input.
        let s = k - 1;
        let inputs: Vec<usize> = tokens.iter().flat_map(|t| t[..s].iter().copied()).collect();
        let suffix = if s == 0 {
            None
        } else {
            Some(g.tape.gather_rows(table, &inputs)?)
        };
        let (h, t) = self.backbone(g, prefix, suffix, b, s)?;
        let logits = self.ar_head.forward(g, h)?;
        let pl = self.config.prefix_len();
        let mut targets = vec![0; b * t];
        let mut mask = vec![false; b * t];
        for (i, toks) in tokens.iter().enumerate() {
            for (j, &tok) in toks.iter().enumerate() {
                let r = i * t + pl - 1 + j;
                targets[r] = tok;
                mask[r] = true;
            }
        }
        Ok((logits, targets, mask))
    }

    pub fn to_checkpoint(&self, codec: &ActionCodec) -> Result<Checkpoint> {
        let cfg = serde_json::json!({ "model": self.config, "codec": codec });
        Checkpoint::capture(KIND_POLICY, cfg, self)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, ActionCodec)> {
        ckpt.expect_kind(KIND_POLICY)?;
        #[derive(Deserialize)]
        struct Cfg {
            model: PolicyConfig,
            codec: ActionCodec,
        }
        let cfg: Cfg = ckpt.config()?;
        let mut model = Self::new(cfg.model, 0)?;
        ckpt.restore(&mut model)?;
        Ok((model, ActionCodec::new(cfg.codec.ranges)?))
    }
}

pub const KIND_POLICY: &str = "policy";

impl Module for PolicyModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.patch_proj.params();
        v.extend(self.state_proj.params());
        v.extend([&self.instr_embed, &self.pos_embed, &self.queries]);
        v.extend(self.blocks.iter().flat_map(Block::params));
        v.extend(self.final_norm.params());
        v.extend(self.action_head.params());
        v.push(&self.ar_embed);
        v.extend(self.ar_head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.patch_proj.params_mut();
        v.extend(self.state_proj.params_mut());
        v.extend([&mut self.instr_embed, &mut self.pos_embed, &mut self.queries]);
        v.extend(self.blocks.iter_mut().flat_map(Block::params_mut));
        v.extend(self.final_norm.params_mut());
        v.extend(self.action_head.params_mut());
        v.push(&mut self.ar_embed);
        v.extend(self.ar_head.params_mut());
        v
    }

    fn quant_linears(&self) -> Vec<&QuantLinear> {
        self.blocks.iter().flat_map(Block::quant_linears).collect()
    }

    fn quant_linears_mut(&mut self) -> Vec<&mut QuantLinear> {
        self.blocks.iter_mut().flat_map(Block::quant_linears_mut).collect()
    }
}

/// One chunk for one observation: exactly one backbone pass.
pub fn policy_forward(model: &PolicyModel, obs: &Observation, horizon: usize) -> Result<ActionChunk> {
    Ok(predict_chunks(model, &[obs], horizon)?.remove(0))
}

/// One chunk per observation from a single batched pass.
pub fn predict_chunks(model: &PolicyModel, obs: &[&Observation], horizon: usize) -> Result<Vec<ActionChunk>> {
    let mut g = Graph::eval();
    let out = model.forward_chunks(&mut g, obs, horizon)?;
    let v = g.tape.value(out);
    if !v.all_finite() {
        return Err(Error::NonFinite("policy output"));
    }
    let per = (horizon + 1) * ACTION_DIM;
    v.data()
        .chunks(per)
        .map(|c| ActionChunk::new(horizon, ACTION_DIM, c.to_vec()))
        .collect()
}

fn chunk_targets(records: &[&TrajectoryRecord], horizon: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(records.len() * (horizon + 1) * ACTION_DIM);
    for r in records {
        if r.chunk.horizon != horizon {
            return Err(Error::contract("record horizon does not match the requested horizon"));
        }
        data.extend(&r.chunk.actions);
    }
    Ok(Tensor::matrix(records.len() * (horizon + 1), ACTION_DIM, data))
}

/// L1 chunk loss on a batch; returns the loss before the update.
pub fn finetune_step_l1(model: &mut PolicyModel, batch: &[&TrajectoryRecord], horizon: usize, opt: &mut Optimizer, frozen: &[String]) -> Result<f64> {
    let target = chunk_targets(batch, horizon)?;
    let obs: Vec<&Observation> = batch.iter().map(|r| &r.obs).collect();
    let mut g = Graph::with_frozen(frozen);
    let pred = model.forward_chunks(&mut g, &obs, horizon)?;
    let loss = action_l1_loss_batch(&mut g.tape, pred, &target, batch.len())?;
    let v = g.tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("action loss"));
    }
    let grads = g.tape.backward(loss)?;
    opt.step(model, &g.param_grads(&grads))?;
    Ok(v)
}

/// Flattened bin ids of a chunk, row-major.
pub fn chunk_tokens(codec: &ActionCodec, chunk: &ActionChunk) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(chunk.actions.len());
    for k in 0..chunk.len() {
        out.extend(codec.encode(chunk.row(k))?.into_iter().map(usize::from));
    }
    Ok(out)
}

/// Cross-entropy over discretized action tokens; returns the loss before the
/// update.
pub fn pretrain_step_ar(model: &mut PolicyModel, batch: &[&TrajectoryRecord], codec: &ActionCodec, opt: &mut Optimizer, frozen: &[String]) -> Result<f64> {
    let tokens = batch.iter().map(|r| chunk_tokens(codec, &r.chunk)).collect::<Result<Vec<_>>>()?;
    let obs: Vec<&Observation> = batch.iter().map(|r| &r.obs).collect();
    let mut g = Graph::with_frozen(frozen);
    let (logits, targets, mask) = model.forward_ar(&mut g, &obs, &tokens)?;
    let loss = lm_loss(&mut g.tape, logits, &targets, &mask)?;
    let v = g.tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("action token loss"));
    }
    let grads = g.tape.backward(loss)?;
    opt.step(model, &g.param_grads(&grads))?;
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyTrainConfig {
    pub model: PolicyConfig,
    pub reach: ReachConfig,
    pub optim: OptimConfig,
    pub episodes: usize,
    pub ar_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    /// Anneal the L1-phase learning rate to zero along a half cosine.
    pub cosine_decay: bool,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            model: PolicyConfig::default(),
            reach: ReachConfig::default(),
            optim: OptimConfig {
                clip_norm: 1.0,
                ..OptimConfig::adam(1e-3)
            },
            episodes: 2000,
            ar_steps: 0,
            steps: 1500,
            batch_size: 32,
            seed: 0,
            eval_episodes: 100,
            eval_seed: 12345,
            cosine_decay: true,
        }
    }
}

impl PolicyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.reach.validate()?;
        self.optim.validate()?;
        if self.reach.grid != self.model.grid {
            return Err(Error::contract("model grid must match environment grid"));
        }
        if self.reach.horizon + 1 > self.model.chunk_capacity {
            return Err(Error::contract("horizon exceeds chunk capacity"));
        }
        if self.episodes == 0 || self.steps == 0 || self.batch_size == 0 || self.eval_episodes == 0 {
            return Err(Error::contract("episodes, steps, batch_size and eval_episodes must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub step: usize,
    pub phase: PolicyPhase,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyPhase {
    Ar,
    L1,
}

/// Generates expert data, optionally pretrains on action tokens, then
/// trains the chunk head with the L1 objective.
pub fn train_policy(cfg: &PolicyTrainConfig) -> Result<(PolicyModel, ActionCodec, Vec<PolicyRecord>)> {
    cfg.validate()?;
    let (data, _) = gen_reach_dataset(&cfg.reach, cfg.episodes, cfg.seed)?;
    train_policy_on(cfg, &data)
}

pub fn train_policy_on(cfg: &PolicyTrainConfig, data: &TrajectoryDataset) -> Result<(PolicyModel, ActionCodec, Vec<PolicyRecord>)> {
    cfg.validate()?;
    if data.records.is_empty() {
        return Err(Error::contract("empty trajectory dataset"));
    }
    let h = cfg.reach.horizon;
    let codec = ActionCodec::new(data.ranges.clone())?;
    let mut model = PolicyModel::new(cfg.model, cfg.seed)?;
    let mut sampler = BatchSampler::new(cfg.seed ^ 0x706f_6c69, data.records.len());
    let mut log = Vec::with_capacity(cfg.ar_steps + cfg.steps);
    let mut opt = Optimizer::new(cfg.optim)?;
    let ar_frozen = vec![GROUP_QUERIES.to_string(), GROUP_ACTION_HEAD.to_string()];
    for step in 0..cfg.ar_steps {
        let batch: Vec<_> = sampler.next_batch(cfg.batch_size).into_iter().map(|i| &data.records[i]).collect();
        let loss = pretrain_step_ar(&mut model, &batch, &codec, &mut opt, &ar_frozen)?;
        log.push(PolicyRecord { step, phase: PolicyPhase::Ar, loss });
    }
    let mut opt = Optimizer::new(cfg.optim)?;
    let l1_frozen = vec![GROUP_AR.to_string()];
    for step in 0..cfg.steps {
        if cfg.cosine_decay {
            let progress = step as f64 / cfg.steps as f64;
            opt.config.lr = cfg.optim.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        }
        let batch: Vec<_> = sampler.next_batch(cfg.batch_size).into_iter().map(|i| &data.records[i]).collect();
        let loss = finetune_step_l1(&mut model, &batch, h, &mut opt, &l1_frozen)?;
        log.push(PolicyRecord { step, phase: PolicyPhase::L1, loss });
    }
    Ok((model, codec, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_final_distance: f64,
    pub chunks: u64,
}

/// Rolls out `episodes` held-out episodes in lock-step. Each chunk is
/// executed in full before the next one is requested.
pub fn evaluate_policy(model: &PolicyModel, reach: &ReachConfig, episodes: usize, seed: u64) -> Result<PolicyEval> {
    let h = reach.horizon;
    run_episodes(reach, episodes, seed, |obs| predict_chunks(model, obs, h))
}

/// Uniform random actions in `[-1, 1]`, executed in the same chunked way.
pub fn evaluate_random(reach: &ReachConfig, episodes: usize, seed: u64) -> Result<PolicyEval> {
    let h = reach.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6e64);
    run_episodes(reach, episodes, seed, |obs| {
        obs.iter()
            .map(|_| {
                let a = (0..(h + 1) * ACTION_DIM).map(|_| rng.random_range(-1.0..=1.0)).collect();
                ActionChunk::new(h, ACTION_DIM, a)
            })
            .collect()
    })
}

fn run_episodes(reach: &ReachConfig, episodes: usize, seed: u64, mut policy: impl FnMut(&[&Observation]) -> Result<Vec<ActionChunk>>) -> Result<PolicyEval> {
    reach.validate()?;
    if episodes == 0 {
        return Err(Error::contract("need at least one episode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut envs: Vec<ReachEnv> = (0..episodes).map(|_| ReachEnv::reset(*reach, &mut rng)).collect();
    let mut chunks = 0u64;
    while !envs[0].done() {
        let obs: Vec<Observation> = envs.iter().map(ReachEnv::observe).collect();
        let refs: Vec<&Observation> = obs.iter().collect();
        let plan = policy(&refs)?;
        chunks += plan.len() as u64;
        for (env, chunk) in envs.iter_mut().zip(&plan) {
            for k in 0..chunk.len() {
                if env.done() {
                    break;
                }
                env.step(chunk.row(k))?;
            }
        }
    }
    let successes = envs.iter().filter(|e| e.success()).count();
    Ok(PolicyEval {
        episodes,
        success_rate: successes as f64 / episodes as f64,
        mean_final_distance: envs.iter().map(ReachEnv::distance).sum::<f64>() / episodes as f64,
        chunks,
    })
}

impl PolicyModel {
    pub fn set_inference(&mut self) -> Result<()> {
        self.set_mode(Mode::Inference)
    }
}
