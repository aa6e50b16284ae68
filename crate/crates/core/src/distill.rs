//! Teacher training and quantize-then-distill for the sequence task.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SeqSample, SeqTask};
use crate::error::{Error, Result};
use crate::loss::{aux_loss, hidden_mse, lm_loss, total_loss, LossWeights};
use crate::nn::{EncoderConfig, Graph, Mode, Module, SeqModel, GROUP_CONNECTOR, GROUP_DECODER, GROUP_EMBED, GROUP_HEAD};
use crate::optim::{OptimConfig, OptimKind, Optimizer};
use crate::tensor::Tensor;

pub fn default_freeze_set() -> Vec<String> {
    [GROUP_EMBED, GROUP_CONNECTOR, GROUP_DECODER, GROUP_HEAD]
        .map(String::from)
        .to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Reserved for an adaptive optimizer; unused with momentum.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_set: Vec<String>,
    /// Number of distillation samples drawn from the training stream.
    pub train_size: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        let o = OptimConfig::default();
        Self {
            lambda: 0.1,
            learning_rate: 0.02,
            momentum: o.momentum,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            clip_norm: o.clip_norm,
            steps: 200,
            batch_size: 16,
            seed: 0,
            freeze_set: default_freeze_set(),
            train_size: 256,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.lambda)?;
        self.optim().validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.train_size == 0 {
            return Err(Error::contract("steps, batch_size and train_size must be at least 1"));
        }
        for g in [GROUP_DECODER, GROUP_CONNECTOR] {
            if !self.freeze_set.iter().any(|f| f == g) {
                return Err(Error::contract(format!("freeze_set must include {g:?}")));
            }
        }
        Ok(())
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            kind: OptimKind::Momentum,
            lr: self.learning_rate,
            momentum: self.momentum,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub model: EncoderConfig,
    pub task: SeqTask,
    pub optim: OptimConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub train_size: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            model: EncoderConfig::default(),
            task: SeqTask::default(),
            optim: OptimConfig {
                clip_norm: 1.0,
                ..OptimConfig::adam(2e-3)
            },
            steps: 600,
            batch_size: 16,
            seed: 0,
            train_size: 4096,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.optim.validate()?;
        if self.model.quantized {
            return Err(Error::contract("the teacher must be full precision"));
        }
        if self.task.input_len() > self.model.max_seq {
            return Err(Error::contract("task sequences exceed max_seq"));
        }
        if self.steps == 0 || self.batch_size == 0 || self.train_size == 0 {
            return Err(Error::contract("steps, batch_size and train_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lm_loss: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean cross-entropy over answer tokens.
    pub loss: f64,
    /// Fraction of answer tokens predicted exactly.
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub eval: Option<EvalMetrics>,
}

impl TrainLog {
    /// One JSON object per step, then an `{"eval": ...}` line if present.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        if let Some(e) = &self.eval {
            out.push_str(&serde_json::to_string(&serde_json::json!({ "eval": e }))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct EvalLine {
            eval: EvalMetrics,
        }
        let mut log = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Ok(r) = serde_json::from_str::<TrainRecord>(line) {
                if log.eval.is_some() || log.records.last().is_some_and(|p| p.step >= r.step) {
                    return Err(Error::Format("train log steps out of order".into()));
                }
                log.records.push(r);
            } else {
                log.eval = Some(serde_json::from_str::<EvalLine>(line)?.eval);
            }
        }
        Ok(log)
    }
}

/// Seeded, order-deterministic batch index stream (uniform with replacement).
pub struct BatchSampler {
    rng: ChaCha8Rng,
    len: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, len: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            len,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.rng.random_range(0..self.len)).collect()
    }
}

struct Batch {
    inputs: Vec<Vec<usize>>,
    targets: Vec<usize>,
    mask: Vec<bool>,
}

fn make_batch<'a>(samples: impl IntoIterator<Item = &'a SeqSample>) -> Batch {
    let mut b = Batch {
        inputs: Vec::new(),
        targets: Vec::new(),
        mask: Vec::new(),
    };
    for s in samples {
        let (i, t, m) = s.teacher_forcing();
        b.inputs.push(i);
        b.targets.extend(t);
        b.mask.extend(m);
    }
    b
}

fn check_record(r: TrainRecord) -> Result<TrainRecord> {
    if r.lm_loss.is_finite() && r.aux_loss.is_finite() && r.total_loss.is_finite() {
        Ok(r)
    } else {
        Err(Error::Diverged {
            step: r.step,
            lm_loss: r.lm_loss,
            aux_loss: r.aux_loss,
            total_loss: r.total_loss,
        })
    }
}

/// Trains the full-precision teacher on the task loss alone.
pub fn train_teacher(cfg: &TeacherConfig, train: &[SeqSample]) -> Result<(SeqModel, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let mut model = SeqModel::new(cfg.model, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optim)?;
    let mut sampler = BatchSampler::new(cfg.seed ^ 0x7465_6163, train.len());
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = make_batch(sampler.next_batch(cfg.batch_size).iter().map(|&i| &train[i]));
        let mut g = Graph::train();
        let out = model.forward(&mut g, &batch.inputs)?;
        let lm = lm_loss(&mut g.tape, out.logits, &batch.targets, &batch.mask)?;
        let v = g.tape.value(lm).item();
        check_record(TrainRecord {
            step,
            lm_loss: v,
            aux_loss: 0.0,
            total_loss: v,
        })
        .map(|r| log.records.push(r))?;
        let grads = g.tape.backward(lm)?;
        opt.step(&mut model, &g.param_grads(&grads))?;
    }
    Ok((model, log))
}

/// Copies the teacher and switches fake quantization on for every
/// quantizable encoder layer when `student.quantized` is set.
pub fn init_student_from_teacher(teacher: &SeqModel, student: EncoderConfig) -> Result<SeqModel> {
    if !teacher.config.same_shape(&student) {
        return Err(Error::contract(format!(
            "teacher config {:?} does not match student config {:?}",
            teacher.config, student
        )));
    }
    if teacher.config.quantized || teacher.mode() != Mode::Training {
        return Err(Error::contract("the teacher must be a full-precision training-mode model"));
    }
    let mut s = teacher.clone();
    s.config.quantized = student.quantized;
    for block in &mut s.encoder {
        for ql in block.quant_linears_mut() {
            ql.quantized = student.quantized;
        }
    }
    Ok(s)
}

/// Teacher encoder hidden states for one batch; these are fixed targets.
pub fn teacher_targets(teacher: &SeqModel, inputs: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    teacher.encoder_hidden_states(inputs)
}

/// One optimizer step on `lm + lambda * aux`. The aux term is always
/// measured so it can be logged, but it only enters the objective when
/// `lambda > 0`.
pub fn distill_step(
    student: &mut SeqModel,
    teacher: &SeqModel,
    batch: &[&SeqSample],
    cfg: &DistillConfig,
    opt: &mut Optimizer,
    step: usize,
) -> Result<TrainRecord> {
    let b = make_batch(batch.iter().copied());
    let targets = teacher_targets(teacher, &b.inputs)?;
    let mut g = Graph::with_frozen(&cfg.freeze_set);
    let out = student.forward(&mut g, &b.inputs)?;
    let lm = lm_loss(&mut g.tape, out.logits, &b.targets, &b.mask)?;
    let t_vars: Vec<_> = targets.into_iter().map(|t| g.tape.constant(t)).collect();
    let aux = aux_loss(&mut g.tape, &t_vars, &out.hiddens)?;
    let total = total_loss(&mut g.tape, lm, aux, LossWeights::new(cfg.lambda)?)?;
    let record = check_record(TrainRecord {
        step,
        lm_loss: g.tape.value(lm).item(),
        aux_loss: g.tape.value(aux).item(),
        total_loss: g.tape.value(total).item(),
    })?;
    let grads = g.tape.backward(total)?;
    opt.step(student, &g.param_grads(&grads))?;
    Ok(record)
}

/// Full distillation run from a trained teacher.
pub fn run_distillation(teacher: &SeqModel, cfg: &DistillConfig, train: &[SeqSample], eval: &[SeqSample]) -> Result<(SeqModel, TrainLog)> {
    cfg.validate()?;
    let pool = &train[..cfg.train_size.min(train.len())];
    if pool.is_empty() {
        return Err(Error::contract("empty distillation set"));
    }
    let mut student = init_student_from_teacher(teacher, EncoderConfig {
        quantized: true,
        ..teacher.config
    })?;
    let mut opt = Optimizer::new(cfg.optim())?;
    let mut sampler = BatchSampler::new(cfg.seed, pool.len());
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch: Vec<&SeqSample> = sampler.next_batch(cfg.batch_size).into_iter().map(|i| &pool[i]).collect();
        log.records.push(distill_step(&mut student, teacher, &batch, cfg, &mut opt, step)?);
    }
    if !eval.is_empty() {
        log.eval = Some(evaluate(&student, eval)?);
    }
    Ok((student, log))
}

const EVAL_CHUNK: usize = 64;

/// Answer-token loss and accuracy.
pub fn evaluate(model: &SeqModel, samples: &[SeqSample]) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::EmptySupervision);
    }
    let mut nll = 0.0;
    let mut correct = 0usize;
    let mut count = 0usize;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let b = make_batch(chunk);
        let logits = model.logits(&b.inputs)?;
        for (r, (&t, &m)) in b.targets.iter().zip(&b.mask).enumerate() {
            if !m {
                continue;
            }
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll += lse - row[t];
            let argmax = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            correct += (argmax == t) as usize;
            count += 1;
        }
    }
    let loss = nll / count as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("evaluation loss"));
    }
    Ok(EvalMetrics {
        loss,
        accuracy: correct as f64 / count as f64,
    })
}

/// Per-layer mean squared distance between teacher and student encoder
/// hidden states over `eval`.
pub fn eval_alignment(student: &SeqModel, teacher: &SeqModel, eval: &[SeqSample]) -> Result<Vec<f64>> {
    let layers = teacher.config.layers;
    if student.config.layers != layers {
        return Err(Error::contract("teacher and student layer counts differ"));
    }
    let mut sums = vec![0.0; layers];
    let mut rows = 0usize;
    for chunk in eval.chunks(EVAL_CHUNK) {
        let b = make_batch(chunk);
        let t = teacher.encoder_hidden_states(&b.inputs)?;
        let s = student.encoder_hidden_states(&b.inputs)?;
        let n = t[0].rows();
        for l in 0..layers {
            sums[l] += hidden_mse(&t[l], &s[l]) * n as f64;
        }
        rows += n;
    }
    Ok(sums.into_iter().map(|s| if rows == 0 { 0.0 } else { s / rows as f64 }).collect())
}

/// CSV of mean-pooled hidden states: `sample_id,layer,role,v0,...`, one row
/// per (sample, layer, role).
pub fn export_embeddings(student: &SeqModel, teacher: &SeqModel, eval: &[SeqSample]) -> Result<String> {
    let n = teacher.config.hidden;
    let mut out = String::from("sample_id,layer,role");
    for j in 0..n {
        let _ = write!(out, ",v{j}");
    }
    out.push('\n');
    let mut sample_id = 0usize;
    for chunk in eval.chunks(EVAL_CHUNK) {
        let b = make_batch(chunk);
        let seq_len = b.inputs[0].len();
        let roles = [("teacher", teacher.encoder_hidden_states(&b.inputs)?), ("student", student.encoder_hidden_states(&b.inputs)?)];
        for i in 0..chunk.len() {
            for l in 0..teacher.config.layers {
                for (role, hs) in &roles {
                    let _ = write!(out, "{},{},{}", sample_id + i, l, role);
                    for j in 0..n {
                        let mean = (0..seq_len).map(|p| hs[l].row(i * seq_len + p)[j]).sum::<f64>() / seq_len as f64;
                        let _ = write!(out, ",{mean:e}");
                    }
                    out.push('\n');
                }
            }
        }
        sample_id += chunk.len();
    }
    Ok(out)
}
