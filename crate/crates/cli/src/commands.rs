use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tern_bench::{run_bench, BenchConfig, BenchReport};
use tern_core::checkpoint::KIND_SEQ;
use tern_core::data::{gen_reach_dataset, gen_sequence_dataset, write_sequences, DatasetKind, TrajectoryDataset};
use tern_core::distill::{eval_alignment, evaluate, export_embeddings, run_distillation, train_teacher, EvalMetrics};
use tern_core::policy::{evaluate_policy, evaluate_random, train_policy, train_policy_on, PolicyEval, PolicyModel, KIND_POLICY};
use tern_core::{memory_total, Checkpoint, LayerMemory, Mode, Module, SeqModel};

use crate::config::{DistillRunConfig, EvalPolicyConfig, GenDataConfig, TrainToyConfig};
use crate::CliError;

fn out_dir(dir: &str) -> Result<PathBuf, CliError> {
    let p = PathBuf::from(dir);
    fs::create_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
    Ok(p)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(tern_core::Error::from)?;
    text.push('\n');
    write(path, text)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

pub fn memory_table(rows: &[LayerMemory]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<28} {:>12} {:>8} {:>12} {:>8} {:>8} {:>8}", "layer", "shape", "format", "bytes", "vs f16", "vs f32", "vs f64");
    let total = memory_total(rows);
    for r in rows.iter().chain(std::iter::once(&total)) {
        let shape = r.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        let format = if r.name == "total" {
            ""
        } else if r.packed {
            "ternary"
        } else {
            "f64"
        };
        let _ = writeln!(
            out,
            "{:<28} {:>12} {:>8} {:>12} {:>7.2}x {:>7.2}x {:>7.2}x",
            r.name,
            shape,
            format,
            r.bytes,
            r.ratio_vs(r.f16_bytes),
            r.ratio_vs(r.f32_bytes),
            r.ratio_vs(r.f64_bytes)
        );
    }
    out
}

pub fn quantize(input: &Path, output: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(input)?;
    if ckpt.header.mode == Mode::Inference {
        println!("{} is already an inference checkpoint; nothing to do", input.display());
        return Ok(());
    }
    let packed = match ckpt.header.kind.as_str() {
        KIND_SEQ => {
            let mut m = SeqModel::from_checkpoint(&ckpt)?;
            m.set_mode(Mode::Inference)?;
            m.to_checkpoint()?
        }
        KIND_POLICY => {
            let (mut m, codec) = PolicyModel::from_checkpoint(&ckpt)?;
            m.set_mode(Mode::Inference)?;
            m.to_checkpoint(&codec)?
        }
        other => return Err(tern_core::Error::Format(format!("unknown checkpoint kind {other:?}")).into()),
    };
    let bytes = packed.to_bytes()?;
    write(output, &bytes)?;
    print!("{}", memory_table(&packed.memory_table()));
    let before = fs::metadata(input).map_err(|e| CliError::io(input, e))?.len();
    println!("file: {} -> {} bytes ({:.2}x smaller)", before, bytes.len(), before as f64 / bytes.len() as f64);
    Ok(())
}

pub fn inspect(path: &Path, json: bool) -> Result<(), CliError> {
    let ckpt = load_checkpoint(path)?;
    let rows = ckpt.memory_table();
    if json {
        #[derive(Serialize)]
        struct Out<'a> {
            kind: &'a str,
            mode: Mode,
            layers: &'a [LayerMemory],
            total: LayerMemory,
        }
        let out = Out { kind: &ckpt.header.kind, mode: ckpt.header.mode, layers: &rows, total: memory_total(&rows) };
        println!("{}", serde_json::to_string_pretty(&out).map_err(tern_core::Error::from)?);
    } else {
        println!("kind: {}  mode: {:?}", ckpt.header.kind, ckpt.header.mode);
        print!("{}", memory_table(&rows));
    }
    Ok(())
}

pub fn bench(cfg: &BenchConfig, output: Option<&Path>) -> Result<BenchReport, CliError> {
    let report = run_bench(cfg)?;
    println!("{:>6} {:>6} {:>6} {:>12} {:>12} {:>12} {:>8} {:>10} {:>10}", "m", "n", "tokens", "kernel us", "layer us", "float us", "speedup", "float_muls", "int_adds");
    for c in &report.cases {
        println!(
            "{:>6} {:>6} {:>6} {:>12.1} {:>12.1} {:>12.1} {:>7.2}x {:>10} {:>10}",
            c.m,
            c.n,
            c.tokens,
            c.ternary_kernel.median_ns / 1e3,
            c.ternary_layer.median_ns / 1e3,
            c.float_baseline.median_ns / 1e3,
            c.speedup,
            c.counters.float_muls,
            c.counters.int_adds
        );
    }
    if let Some(p) = output {
        write(p, report.to_json()? + "\n")?;
    }
    Ok(report)
}

pub fn train_toy(cfg: &TrainToyConfig) -> Result<(), CliError> {
    let dir = out_dir(&cfg.out_dir)?;
    let t = &cfg.teacher;
    let train = gen_sequence_dataset(&t.task, t.train_size, cfg.data_seed)?;
    let eval = gen_sequence_dataset(&t.task, cfg.eval_size.max(1), cfg.eval_seed)?;
    let (model, mut log) = train_teacher(t, &train)?;
    let e = evaluate(&model, &eval)?;
    log.eval = Some(e);
    model.save(dir.join("teacher.tern"))?;
    write(&dir.join("train_log.jsonl"), log.to_jsonl()?)?;
    write_json(&dir.join("summary.json"), &e)?;
    println!("teacher: answer loss {:.4}, accuracy {:.4}", e.loss, e.accuracy);
    Ok(())
}

#[derive(Serialize)]
struct DistillSummary {
    lambda: f64,
    eval: EvalMetrics,
    teacher_eval: EvalMetrics,
    alignment_mse: Vec<f64>,
}

pub fn distill(cfg: &DistillRunConfig) -> Result<(), CliError> {
    let dir = out_dir(&cfg.out_dir)?;
    let task = &cfg.teacher.task;
    let train = gen_sequence_dataset(task, cfg.teacher.train_size.max(cfg.distill.train_size), cfg.data_seed)?;
    let eval = gen_sequence_dataset(task, cfg.eval_size.max(1), cfg.eval_seed)?;
    let teacher = if cfg.teacher_checkpoint.is_empty() {
        let (t, log) = train_teacher(&cfg.teacher, &train[..cfg.teacher.train_size])?;
        t.save(dir.join("teacher.tern"))?;
        write(&dir.join("teacher_log.jsonl"), log.to_jsonl()?)?;
        t
    } else {
        SeqModel::from_checkpoint(&load_checkpoint(Path::new(&cfg.teacher_checkpoint))?)?
    };
    let (student, log) = run_distillation(&teacher, &cfg.distill, &train, &eval)?;
    student.save(dir.join("student.tern"))?;
    write(&dir.join("train_log.jsonl"), log.to_jsonl()?)?;
    let summary = DistillSummary {
        lambda: cfg.distill.lambda,
        eval: match log.eval {
            Some(e) => e,
            None => evaluate(&student, &eval)?,
        },
        teacher_eval: evaluate(&teacher, &eval)?,
        alignment_mse: eval_alignment(&student, &teacher, &eval)?,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    if cfg.export_embeddings {
        write(&dir.join("embeddings.csv"), export_embeddings(&student, &teacher, &eval)?)?;
    }
    println!(
        "student (lambda {}): answer loss {:.4}, accuracy {:.4}; teacher loss {:.4}; alignment {:?}",
        summary.lambda, summary.eval.loss, summary.eval.accuracy, summary.teacher_eval.loss, summary.alignment_mse
    );
    Ok(())
}

#[derive(Serialize)]
struct PolicySummary {
    policy: PolicyEval,
    random: PolicyEval,
}

pub fn eval_policy(cfg: &EvalPolicyConfig) -> Result<(), CliError> {
    let dir = out_dir(&cfg.out_dir)?;
    let t = &cfg.train;
    t.validate()?;
    let mut model = if cfg.checkpoint.is_empty() {
        let (model, codec, log) = if cfg.dataset.is_empty() {
            train_policy(t)?
        } else {
            let data = TrajectoryDataset::read(&cfg.dataset, t.reach)?;
            train_policy_on(t, &data)?
        };
        let mut lines = String::new();
        for r in &log {
            lines.push_str(&serde_json::to_string(r).map_err(tern_core::Error::from)?);
            lines.push('\n');
        }
        write(&dir.join("train_log.jsonl"), lines)?;
        let mut m = model;
        m.set_mode(Mode::Inference)?;
        write(&dir.join("policy.tern"), m.to_checkpoint(&codec)?.to_bytes()?)?;
        m
    } else {
        PolicyModel::from_checkpoint(&load_checkpoint(Path::new(&cfg.checkpoint))?)?.0
    };
    if model.mode() != Mode::Inference {
        model.set_mode(Mode::Inference)?;
    }
    let summary = PolicySummary {
        policy: evaluate_policy(&model, &t.reach, t.eval_episodes, t.eval_seed)?,
        random: evaluate_random(&t.reach, t.eval_episodes, t.eval_seed)?,
    };
    write_json(&dir.join("eval.json"), &summary)?;
    println!(
        "policy: success {:.2}, mean final distance {:.4} over {} episodes ({} chunks)",
        summary.policy.success_rate, summary.policy.mean_final_distance, summary.policy.episodes, summary.policy.chunks
    );
    println!("random: success {:.2}, mean final distance {:.4}", summary.random.success_rate, summary.random.mean_final_distance);
    Ok(())
}

pub fn gen_data(cfg: &GenDataConfig) -> Result<(), CliError> {
    let s = &cfg.spec;
    s.validate()?;
    let path = PathBuf::from(&cfg.output);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    match s.kind {
        DatasetKind::Sequence => {
            let samples = gen_sequence_dataset(&s.seq, s.size, s.seed)?;
            write_sequences(&path, &s.seq, &samples)?;
            println!("wrote {} sequence samples to {}", samples.len(), path.display());
        }
        DatasetKind::Trajectory => {
            let (data, stats) = gen_reach_dataset(&s.reach, s.size, s.seed)?;
            data.write(&path)?;
            println!(
                "wrote {} records from {} episodes to {} (expert success {}/{})",
                data.records.len(),
                s.size,
                path.display(),
                stats.successes,
                stats.episodes
            );
        }
    }
    Ok(())
}
