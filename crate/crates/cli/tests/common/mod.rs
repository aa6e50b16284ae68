#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn tern(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tern")).args(args).output().expect("spawn tern")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Default config of `sub` as a TOML table.
pub fn default_config(sub: &str) -> toml::Table {
    let out = tern(&[sub, "--print-config"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    String::from_utf8(out.stdout).unwrap().parse().unwrap()
}

/// Sets a dotted key, e.g. `teacher.model.hidden`.
pub fn set(table: &mut toml::Table, key: &str, value: impl Into<toml::Value>) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap();
    let mut t = table;
    for p in parts {
        t = t.get_mut(p).and_then(toml::Value::as_table_mut).unwrap_or_else(|| panic!("no table {p}"));
    }
    assert!(t.contains_key(last), "no key {key}");
    t.insert(last.into(), value.into());
}

pub fn write_config(path: &Path, table: &toml::Table) {
    std::fs::write(path, toml::to_string(table).unwrap()).unwrap();
}

pub fn tiny_distill(out_dir: &Path) -> toml::Table {
    let mut c = default_config("distill");
    set(&mut c, "out_dir", out_dir.to_str().unwrap());
    set(&mut c, "eval_size", 16);
    set(&mut c, "teacher.steps", 10);
    set(&mut c, "teacher.batch_size", 4);
    set(&mut c, "teacher.train_size", 32);
    set(&mut c, "teacher.model.hidden", 32);
    set(&mut c, "teacher.model.heads", 2);
    set(&mut c, "teacher.model.mlp_ratio", 2);
    set(&mut c, "distill.steps", 5);
    set(&mut c, "distill.batch_size", 4);
    set(&mut c, "distill.train_size", 16);
    c
}

pub fn tiny_train_toy(out_dir: &Path) -> toml::Table {
    let mut c = default_config("train-toy");
    set(&mut c, "out_dir", out_dir.to_str().unwrap());
    set(&mut c, "eval_size", 16);
    set(&mut c, "teacher.steps", 10);
    set(&mut c, "teacher.batch_size", 4);
    set(&mut c, "teacher.train_size", 32);
    set(&mut c, "teacher.model.hidden", 32);
    set(&mut c, "teacher.model.heads", 2);
    set(&mut c, "teacher.model.mlp_ratio", 2);
    c
}

pub fn tiny_policy(out_dir: &Path) -> toml::Table {
    let mut c = default_config("eval-policy");
    set(&mut c, "out_dir", out_dir.to_str().unwrap());
    set(&mut c, "train.episodes", 20);
    set(&mut c, "train.steps", 10);
    set(&mut c, "train.batch_size", 4);
    set(&mut c, "train.eval_episodes", 5);
    set(&mut c, "train.model.hidden", 32);
    c
}
