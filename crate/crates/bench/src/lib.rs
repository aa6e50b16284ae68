//! Latency and op-count reporting for the packed ternary kernels.
//!
//! [`run_bench`] times three paths per shape: the bare integer kernel
//! ([`gemv_fast`]), the full packed layer ([`linear_forward`], which adds
//! activation quantization and rescaling) and a naive `f32` matvec over the
//! same dequantized weights. Warmup runs are discarded; the median of the
//! remaining repetitions is reported with min and max attached.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tern_core::kernel::{float_matvec, gemv_fast_parallel, linear_forward_with};
use tern_core::{gemv_fast, memory_report, quantize_acts, Error, OpCounters, PackedTernaryMatrix, Result, Tensor};

pub const REPORT_VERSION: u32 = 1;
pub const MIN_REPS: usize = 10;
/// Wall-time speedup the packed layer is expected to reach at n = 2048.
pub const SOFT_TARGET_SPEEDUP: f64 = 1.5;

/// One random problem: packed ternary weights, their dense `f32` image and
/// an input vector in both forms.
pub struct Case {
    pub packed: PackedTernaryMatrix,
    pub dense: Vec<f32>,
    pub x: Tensor,
    pub x_f32: Vec<f32>,
    pub codes: Vec<i8>,
}

pub fn random_case(m: usize, n: usize, tokens: usize, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Roughly a third zeros, as absmean quantization of Gaussian weights gives.
    let w: Vec<i8> = (0..m * n).map(|_| rng.random_range(-1i8..=1)).collect();
    let alpha = 0.02;
    let packed = PackedTernaryMatrix::pack(&w, m, n, alpha)?;
    let dense = w.iter().map(|&c| c as f32 * alpha as f32).collect();
    let x = Tensor::matrix(tokens, n, (0..tokens * n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let x_f32 = x.data().iter().map(|&v| v as f32).collect();
    let codes = quantize_acts(&x)?.codes;
    Ok(Case { packed, dense, x, x_f32, codes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Machine {
    pub os: String,
    pub arch: String,
    pub cpu: String,
    pub logical_cpus: usize,
    pub features: Vec<String>,
}

impl Machine {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|v| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        #[allow(unused_mut)]
        let mut features = Vec::new();
        #[cfg(target_arch = "x86_64")]
        {
            for (name, on) in [
                ("sse4.2", is_x86_feature_detected!("sse4.2")),
                ("avx2", is_x86_feature_detected!("avx2")),
                ("fma", is_x86_feature_detected!("fma")),
                ("avx512f", is_x86_feature_detected!("avx512f")),
            ] {
                if on {
                    features.push(name.to_string());
                }
            }
        }
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpu,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            features,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeStats {
    pub median_ns: f64,
    pub min_ns: f64,
    pub max_ns: f64,
}

impl TimeStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let mid = s.len() / 2;
        let median = if s.len() % 2 == 1 { s[mid] } else { 0.5 * (s[mid - 1] + s[mid]) };
        Self {
            median_ns: median,
            min_ns: s[0],
            max_ns: s[s.len() - 1],
        }
    }
}

/// Runs `f` `warmup` times untimed, then `reps` timed repetitions.
pub fn time_reps(warmup: usize, reps: usize, mut f: impl FnMut()) -> TimeStats {
    for _ in 0..warmup {
        f();
    }
    let samples: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as f64
        })
        .collect();
    TimeStats::from_samples(&samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub m: usize,
    pub n: usize,
    pub tokens: usize,
    pub ternary_kernel: TimeStats,
    pub ternary_layer: TimeStats,
    pub float_baseline: TimeStats,
    /// Present only for opt-in multi-threaded runs.
    pub parallel_kernel: Option<TimeStats>,
    /// Counters of one packed layer call over all tokens.
    pub counters: OpCounters,
    pub packed_bytes: u64,
    pub f16_bytes: u64,
    pub f32_bytes: u64,
    /// `float_baseline / ternary_layer`, medians.
    pub speedup: f64,
    pub soft_target_speedup: f64,
    pub meets_soft_target: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub format_version: u32,
    pub machine: Machine,
    pub reps: usize,
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
    pub cases: Vec<CaseRecord>,
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a report, rejecting any version other than [`REPORT_VERSION`].
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Format("bench report without format_version".into()))?;
        if found != REPORT_VERSION as u64 {
            return Err(Error::Version {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: REPORT_VERSION,
            });
        }
        Ok(serde_json::from_value(v)?)
    }

    /// Counter fields only, for run-to-run comparison.
    pub fn counters(&self) -> Vec<(usize, usize, usize, OpCounters)> {
        self.cases.iter().map(|c| (c.m, c.n, c.tokens, c.counters)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub shapes: Vec<(usize, usize)>,
    pub tokens: usize,
    pub reps: usize,
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            shapes: vec![(256, 256), (1024, 1024), (2048, 2048)],
            tokens: 1,
            reps: 20,
            warmup: 3,
            threads: 1,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < MIN_REPS {
            return Err(Error::Contract(format!("need at least {MIN_REPS} repetitions, got {}", self.reps)));
        }
        if self.shapes.is_empty() || self.shapes.iter().any(|&(m, n)| m == 0 || n == 0) {
            return Err(Error::Contract("shapes must be non-empty with positive sides".into()));
        }
        if self.tokens == 0 || self.threads == 0 {
            return Err(Error::Contract("tokens and threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parses `"256x256,1024x1024"`.
pub fn parse_shapes(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|part| {
            let (m, n) = part
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| Error::Contract(format!("shape {part:?} is not MxN")))?;
            let p = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Contract(format!("shape {part:?} is not MxN")));
            Ok((p(m)?, p(n)?))
        })
        .collect()
}

fn bench_case(cfg: &BenchConfig, m: usize, n: usize, seed: u64) -> Result<CaseRecord> {
    let case = random_case(m, n, cfg.tokens, seed)?;
    let t = cfg.tokens;
    let kernel = time_reps(cfg.warmup, cfg.reps, || {
        for tok in 0..t {
            black_box(gemv_fast(&case.packed, &case.codes[tok * n..(tok + 1) * n]).unwrap());
        }
    });
    let mut counters = OpCounters::default();
    linear_forward_with(&case.packed, &case.x, &mut counters)?;
    let layer = time_reps(cfg.warmup, cfg.reps, || {
        let mut c = OpCounters::default();
        black_box(linear_forward_with(&case.packed, black_box(&case.x), &mut c).unwrap());
    });
    let mut out = vec![0.0f32; m];
    let float = time_reps(cfg.warmup, cfg.reps, || {
        for tok in 0..t {
            float_matvec(black_box(&case.dense), &case.x_f32[tok * n..(tok + 1) * n], m, n, &mut out);
            black_box(&out);
        }
    });
    let parallel = (cfg.threads > 1).then(|| {
        time_reps(cfg.warmup, cfg.reps, || {
            for tok in 0..t {
                black_box(gemv_fast_parallel(&case.packed, &case.codes[tok * n..(tok + 1) * n], cfg.threads).unwrap());
            }
        })
    });
    let mem = memory_report(m, n, 16)?;
    let speedup = float.median_ns / layer.median_ns.max(1.0);
    Ok(CaseRecord {
        m,
        n,
        tokens: t,
        ternary_kernel: kernel,
        ternary_layer: layer,
        float_baseline: float,
        parallel_kernel: parallel,
        counters,
        packed_bytes: mem.packed_bytes,
        f16_bytes: mem.baseline_bytes,
        f32_bytes: 2 * mem.baseline_bytes,
        speedup,
        soft_target_speedup: SOFT_TARGET_SPEEDUP,
        meets_soft_target: speedup >= SOFT_TARGET_SPEEDUP,
    })
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let cases = cfg
        .shapes
        .iter()
        .enumerate()
        .map(|(i, &(m, n))| bench_case(cfg, m, n, cfg.seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    Ok(BenchReport {
        format_version: REPORT_VERSION,
        machine: Machine::detect(),
        reps: cfg.reps,
        warmup: cfg.warmup,
        threads: cfg.threads,
        seed: cfg.seed,
        cases,
    })
}
