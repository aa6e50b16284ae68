//! `tern`: quantize, inspect, benchmark, train, distill and evaluate.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numeric failure (non-finite loss or values).

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tern_bench::{parse_shapes, BenchConfig};
use tern_core::Error;

use crate::config::{DistillRunConfig, EvalPolicyConfig, GenDataConfig, TrainToyConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(Vec<String>),
    Io { path: PathBuf, err: std::io::Error },
    Core(Error),
}

impl CliError {
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), err }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                Error::NonFinite(_) | Error::Diverged { .. } => 3,
                Error::Contract(_) | Error::EmptySupervision => 1,
                _ => 2,
            },
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Config(list) => {
                write!(f, "invalid configuration:")?;
                for p in list {
                    write!(f, "\n  {p}")?;
                }
                Ok(())
            }
            CliError::Io { path, err } => write!(f, "{}: {err}", path.display()),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "tern", version, about = "Ternary-weight / INT8-activation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Shared flags of the config-driven subcommands.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; every field is required.
    #[arg(long, short, required_unless_present = "print_config")]
    config: Option<PathBuf>,
    /// Print the default config as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pack a training checkpoint's quantized linears into 2-bit ternary form.
    Quantize {
        input: PathBuf,
        output: PathBuf,
    },
    /// Per-layer and total storage with ratios against 16/32/64-bit floats.
    Inspect {
        checkpoint: PathBuf,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Time the packed kernel and layer against a naive f32 matvec.
    Bench {
        /// Comma-separated MxN shapes.
        #[arg(long, default_value = "256x256,1024x1024,2048x2048")]
        shapes: String,
        /// Timed repetitions per path (at least 10).
        #[arg(long, default_value_t = 20)]
        reps: usize,
        /// Untimed warmup runs per path.
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Tokens per call.
        #[arg(long, default_value_t = 1)]
        tokens: usize,
        /// Threads for an extra, separately reported parallel kernel run.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Train the full-precision teacher on the sequence task.
    TrainToy(ConfigArgs),
    /// Distill a ternary student from a teacher.
    Distill(ConfigArgs),
    /// Train (or load) a point-reach policy and evaluate it.
    EvalPolicy(ConfigArgs),
    /// Generate a sequence or trajectory dataset file.
    GenData(ConfigArgs),
}

fn with_config<T: Serialize + DeserializeOwned + Default>(args: &ConfigArgs, run: impl FnOnce(&T) -> Result<(), CliError>) -> Result<(), CliError> {
    if args.print_config {
        print!("{}", config::to_toml(&T::default())?);
        return Ok(());
    }
    let path = args.config.as_deref().ok_or_else(|| CliError::Usage("--config is required".into()))?;
    run(&config::load::<T>(path)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Quantize { input, output } => commands::quantize(&input, &output),
        Command::Inspect { checkpoint, json } => commands::inspect(&checkpoint, json),
        Command::Bench { shapes, reps, warmup, tokens, threads, seed, output } => {
            let shapes = parse_shapes(&shapes).map_err(|e| CliError::Usage(e.to_string()))?;
            let cfg = BenchConfig { shapes, tokens, reps, warmup, threads, seed };
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            commands::bench(&cfg, output.as_deref()).map(drop)
        }
        Command::TrainToy(a) => with_config::<TrainToyConfig>(&a, commands::train_toy),
        Command::Distill(a) => with_config::<DistillRunConfig>(&a, commands::distill),
        Command::EvalPolicy(a) => with_config::<EvalPolicyConfig>(&a, commands::eval_policy),
        Command::GenData(a) => with_config::<GenDataConfig>(&a, commands::gen_data),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
