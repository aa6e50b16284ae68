//! End-to-end runs of the `tern` binary.

mod common;

use std::fs;

use common::*;
use tern_bench::BenchReport;

#[test]
fn missing_config_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_distill(dir.path());
    c["distill"].as_table_mut().unwrap().remove("lambda");
    c.insert("extra".into(), 1.into());
    let path = dir.path().join("cfg.toml");
    write_config(&path, &c);
    let out = tern(&["distill", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("missing field `distill.lambda`"), "{err}");
    assert!(err.contains("unknown field `extra`"), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&tern(&["no-such-command"])), 1);
    assert_eq!(code(&tern(&["distill"])), 1);
    assert_eq!(code(&tern(&["distill", "--config", "/nonexistent/cfg.toml"])), 1);
    assert_eq!(code(&tern(&["bench", "--reps", "3"])), 1);
    assert_eq!(code(&tern(&["--help"])), 0);
}

#[test]
fn bad_checkpoints_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.tern");
    fs::write(&junk, b"definitely not a checkpoint").unwrap();
    let out = tern(&["inspect", junk.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let run = dir.path().join("run");
    let cfg = dir.path().join("cfg.toml");
    write_config(&cfg, &tiny_train_toy(&run));
    assert_eq!(code(&tern(&["train-toy", "--config", cfg.to_str().unwrap()])), 0);
    let mut bytes = fs::read(run.join("teacher.tern")).unwrap();
    // The format version follows the 4-byte magic.
    bytes[4] = bytes[4].wrapping_add(7);
    let bad = dir.path().join("bad.tern");
    fs::write(&bad, &bytes).unwrap();
    let out = tern(&["inspect", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = tern(&["quantize", bad.to_str().unwrap(), dir.path().join("o.tern").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn distill_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let cfg = dir.path().join(format!("{run}.toml"));
        let mut c = tiny_distill(&out_dir);
        set(&mut c, "export_embeddings", true);
        write_config(&cfg, &c);
        let out = tern(&["distill", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        outputs.push(out_dir);
    }
    for f in ["teacher.tern", "teacher_log.jsonl", "student.tern", "train_log.jsonl", "summary.json", "embeddings.csv"] {
        let a = fs::read(outputs[0].join(f)).unwrap();
        let b = fs::read(outputs[1].join(f)).unwrap();
        assert!(!a.is_empty(), "{f} empty");
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn distill_from_saved_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let teacher_dir = dir.path().join("t");
    let cfg = dir.path().join("t.toml");
    write_config(&cfg, &tiny_train_toy(&teacher_dir));
    assert_eq!(code(&tern(&["train-toy", "--config", cfg.to_str().unwrap()])), 0);

    let mut c = tiny_distill(&dir.path().join("s"));
    set(&mut c, "teacher_checkpoint", teacher_dir.join("teacher.tern").to_str().unwrap());
    let cfg = dir.path().join("s.toml");
    write_config(&cfg, &c);
    let out = tern(&["distill", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(!dir.path().join("s/teacher.tern").exists());
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("s/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["lambda"], 0.1);
    assert!(summary["eval"]["loss"].as_f64().unwrap().is_finite());
}

#[test]
fn quantize_shrinks_then_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = dir.path().join("cfg.toml");
    write_config(&cfg, &tiny_distill(&run));
    assert_eq!(code(&tern(&["distill", "--config", cfg.to_str().unwrap()])), 0);
    let src = run.join("student.tern");
    let dst = dir.path().join("packed.tern");
    let out = tern(&["quantize", src.to_str().unwrap(), dst.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ternary") && stdout.contains("total"), "{stdout}");
    assert!(fs::metadata(&dst).unwrap().len() < fs::metadata(&src).unwrap().len());

    let again = dir.path().join("again.tern");
    let out = tern(&["quantize", dst.to_str().unwrap(), again.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("nothing to do"));
    assert!(!again.exists());

    let out = tern(&["inspect", "--json", dst.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["mode"], "inference");
    let layers = v["layers"].as_array().unwrap();
    let sum: u64 = layers.iter().map(|l| l["bytes"].as_u64().unwrap()).sum();
    assert_eq!(v["total"]["bytes"].as_u64().unwrap(), sum);
}

#[test]
fn full_precision_checkpoint_ratio_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = dir.path().join("cfg.toml");
    write_config(&cfg, &tiny_train_toy(&run));
    assert_eq!(code(&tern(&["train-toy", "--config", cfg.to_str().unwrap()])), 0);
    let out = tern(&["inspect", "--json", run.join("teacher.tern").to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["total"]["bytes"], v["total"]["f64_bytes"]);
    let text = String::from_utf8(tern(&["inspect", run.join("teacher.tern").to_str().unwrap()]).stdout).unwrap();
    let total = text.lines().find(|l| l.starts_with("total")).unwrap();
    assert!(total.trim_end().ends_with("1.00x"), "{total}");
}

#[test]
fn eval_policy_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let cfg = dir.path().join(format!("{run}.toml"));
        write_config(&cfg, &tiny_policy(&out_dir));
        let out = tern(&["eval-policy", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("success") && stdout.contains("mean final distance"), "{stdout}");
        runs.push(out_dir);
    }
    for f in ["train_log.jsonl", "policy.tern", "eval.json"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
    let eval: serde_json::Value = serde_json::from_slice(&fs::read(runs[0].join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["policy"]["episodes"], 5);

    // Reload the saved policy instead of training.
    let mut c = tiny_policy(&dir.path().join("c"));
    set(&mut c, "checkpoint", runs[0].join("policy.tern").to_str().unwrap());
    let cfg = dir.path().join("c.toml");
    write_config(&cfg, &c);
    assert_eq!(code(&tern(&["eval-policy", "--config", cfg.to_str().unwrap()])), 0);
    assert_eq!(fs::read(dir.path().join("c/eval.json")).unwrap(), fs::read(runs[0].join("eval.json")).unwrap());
}

#[test]
fn gen_data_trajectories_feed_eval_policy() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("traj.bin");
    let mut g = default_config("gen-data");
    set(&mut g, "output", data.to_str().unwrap());
    set(&mut g, "spec.kind", "trajectory");
    set(&mut g, "spec.size", 20);
    let cfg = dir.path().join("g.toml");
    write_config(&cfg, &g);
    assert_eq!(code(&tern(&["gen-data", "--config", cfg.to_str().unwrap()])), 0);
    let first = fs::read(&data).unwrap();
    assert_eq!(code(&tern(&["gen-data", "--config", cfg.to_str().unwrap()])), 0);
    assert_eq!(fs::read(&data).unwrap(), first);

    let mut c = tiny_policy(&dir.path().join("p"));
    set(&mut c, "dataset", data.to_str().unwrap());
    let cfg = dir.path().join("p.toml");
    write_config(&cfg, &c);
    let out = tern(&["eval-policy", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    fs::write(&data, &first[..first.len() / 2]).unwrap();
    assert_eq!(code(&tern(&["eval-policy", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn bench_report_parses_and_counters_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let mut counters = Vec::new();
    for run in ["a", "b"] {
        let path = dir.path().join(format!("{run}.json"));
        let out = tern(&["bench", "--shapes", "64x64,96x33", "--reps", "10", "--warmup", "1", "--output", path.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let report = BenchReport::from_json(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(report.cases.len(), 2);
        assert_eq!(report.cases[0].counters.float_muls, 2 * 64 + 3);
        assert!(report.cases.iter().all(|c| c.ternary_kernel.min_ns <= c.ternary_kernel.median_ns));
        counters.push(report.counters());
    }
    assert_eq!(counters[0], counters[1]);
}
