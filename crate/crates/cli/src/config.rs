//! TOML run configurations.
//!
//! Every field is required. A file is checked against the serialized
//! default before deserialization so that missing and unknown keys are all
//! reported at once, by dotted path.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tern_core::data::DatasetSpec;
use tern_core::distill::{DistillConfig, TeacherConfig};
use tern_core::policy::PolicyTrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainToyConfig {
    pub out_dir: String,
    /// Seed of the teacher's training samples.
    pub data_seed: u64,
    pub eval_size: usize,
    pub eval_seed: u64,
    pub teacher: TeacherConfig,
}

impl Default for TrainToyConfig {
    fn default() -> Self {
        Self {
            out_dir: "runs/teacher".into(),
            data_seed: 1,
            eval_size: 512,
            eval_seed: 2,
            teacher: TeacherConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillRunConfig {
    pub out_dir: String,
    /// Existing teacher checkpoint; empty trains one from `[teacher]`.
    pub teacher_checkpoint: String,
    pub data_seed: u64,
    pub eval_size: usize,
    pub eval_seed: u64,
    /// Also write `embeddings.csv` with pooled teacher/student states.
    pub export_embeddings: bool,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
}

impl Default for DistillRunConfig {
    fn default() -> Self {
        Self {
            out_dir: "runs/distill".into(),
            teacher_checkpoint: String::new(),
            data_seed: 1,
            eval_size: 512,
            eval_seed: 2,
            export_embeddings: false,
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPolicyConfig {
    pub out_dir: String,
    /// Existing policy checkpoint; empty trains one from `[train]`.
    pub checkpoint: String,
    /// Existing trajectory file; empty generates expert data.
    pub dataset: String,
    pub train: PolicyTrainConfig,
}

impl Default for EvalPolicyConfig {
    fn default() -> Self {
        Self {
            out_dir: "runs/policy".into(),
            checkpoint: String::new(),
            dataset: String::new(),
            train: PolicyTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub output: String,
    pub spec: DatasetSpec,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            output: "data/sequences.bin".into(),
            spec: DatasetSpec::default(),
        }
    }
}

pub fn to_toml<T: Serialize>(cfg: &T) -> Result<String, CliError> {
    toml::to_string(cfg).map_err(|e| CliError::Config(vec![e.to_string()]))
}

fn schema_diff(default: &toml::Table, given: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    let path = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    for (k, dv) in default {
        match (dv, given.get(k)) {
            (_, None) => out.push(format!("missing field `{}`", path(k))),
            (toml::Value::Table(d), Some(toml::Value::Table(g))) => schema_diff(d, g, &path(k), out),
            (toml::Value::Table(_), Some(_)) => out.push(format!("field `{}` must be a table", path(k))),
            _ => {}
        }
    }
    for k in given.keys() {
        if !default.contains_key(k) {
            out.push(format!("unknown field `{}`", path(k)));
        }
    }
}

/// Parses `text` as a `T`, listing every schema violation.
pub fn parse<T: Serialize + DeserializeOwned + Default>(text: &str) -> Result<T, CliError> {
    let given: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(vec![e.to_string()]))?;
    let default = toml::Table::try_from(T::default()).map_err(|e| CliError::Config(vec![e.to_string()]))?;
    let mut problems = Vec::new();
    schema_diff(&default, &given, "", &mut problems);
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    toml::from_str(text).map_err(|e| CliError::Config(vec![e.to_string()]))
}

pub fn load<T: Serialize + DeserializeOwned + Default>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text).map_err(|e| match e {
        CliError::Config(list) => CliError::Config(list.into_iter().map(|p| format!("{}: {p}", path.display())).collect()),
        other => other,
    })
}
