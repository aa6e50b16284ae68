//! Synthetic data: the permutation-copy sequence task and the point-reach
//! environment with its scripted expert, plus binary dataset files.
//!
//! Everything is a pure function of the [`DatasetSpec`] fields and seed.
//!
//! Sequence file layout (little-endian):
//! `b"SEQD"`, version u32, perm_len u32, count u64, then `count` records of
//! `3·perm_len + 1` u16 tokens.
//!
//! Trajectory file layout (little-endian):
//! `b"TRAJ"`, version u32, action_dim u32, horizon u32, grid u32,
//! instr_len u32, action_dim × (min f64, max f64) codec ranges, count u64,
//! then `count` fixed-width records:
//! episode u32, step u32, grid² u8 pixels, state_dim f64,
//! instr_len u16 tokens, (horizon+1)·action_dim f64 actions.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FILE_VERSION: u32 = 1;

// ---------------------------------------------------------------- sequences

/// Token layout for the permutation-copy task. Permutation indices use ids
/// `0..perm_len`, payload tokens `PAYLOAD_BASE..PAYLOAD_BASE+payload_vocab`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqTask {
    pub perm_len: usize,
    pub payload_vocab: usize,
}

pub const PAYLOAD_BASE: usize = 16;
pub const SEP_TOKEN: usize = 255;

impl Default for SeqTask {
    fn default() -> Self {
        Self {
            perm_len: 4,
            payload_vocab: 16,
        }
    }
}

impl SeqTask {
    pub fn validate(&self) -> Result<()> {
        if self.perm_len == 0 || self.perm_len > PAYLOAD_BASE {
            return Err(Error::contract(format!("perm_len must be in 1..={PAYLOAD_BASE}")));
        }
        if self.payload_vocab == 0 || PAYLOAD_BASE + self.payload_vocab > SEP_TOKEN {
            return Err(Error::contract("payload_vocab out of range"));
        }
        Ok(())
    }

    /// Full sequence length `[perm][payload][SEP][answer]`.
    pub fn seq_len(&self) -> usize {
        3 * self.perm_len + 1
    }

    /// Model input length under teacher forcing.
    pub fn input_len(&self) -> usize {
        self.seq_len() - 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqSample {
    pub instruction: Vec<usize>,
    pub payload: Vec<usize>,
    pub answer: Vec<usize>,
}

impl SeqSample {
    pub fn from_parts(instruction: Vec<usize>, payload: Vec<usize>) -> Self {
        let answer = instruction.iter().map(|&i| payload[i]).collect();
        Self {
            instruction,
            payload,
            answer,
        }
    }

    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.instruction.clone();
        t.extend(&self.payload);
        t.push(SEP_TOKEN);
        t.extend(&self.answer);
        t
    }

    /// Inputs `tokens[..-1]`, targets `tokens[1..]`, and the mask selecting
    /// target positions that are answer tokens.
    pub fn teacher_forcing(&self) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
        let t = self.tokens();
        let n = t.len() - 1;
        let first_answer = t.len() - self.answer.len();
        let mask = (0..n).map(|i| i + 1 >= first_answer).collect();
        (t[..n].to_vec(), t[1..].to_vec(), mask)
    }
}

/// Which generator a [`DatasetSpec`] drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Sequence,
    Trajectory,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub size: usize,
    pub seed: u64,
    pub seq: SeqTask,
    pub reach: ReachConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Sequence,
            size: 1000,
            seed: 0,
            seq: SeqTask::default(),
            reach: ReachConfig::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::contract("dataset size must be at least 1"));
        }
        self.seq.validate()?;
        self.reach.validate()
    }
}

pub fn gen_sequence_dataset(task: &SeqTask, size: usize, seed: u64) -> Result<Vec<SeqSample>> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = task.perm_len;
    Ok((0..size)
        .map(|_| {
            let mut perm: Vec<usize> = (0..p).collect();
            perm.shuffle(&mut rng);
            let payload = (0..p)
                .map(|_| PAYLOAD_BASE + rng.random_range(0..task.payload_vocab))
                .collect();
            SeqSample::from_parts(perm, payload)
        })
        .collect())
}

pub fn write_sequences(path: impl AsRef<Path>, task: &SeqTask, samples: &[SeqSample]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(b"SEQD");
    out.extend_from_slice(&FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(task.perm_len as u32).to_le_bytes());
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        if s.instruction.len() != task.perm_len || s.payload.len() != task.perm_len {
            return Err(Error::contract("sample does not match task perm_len"));
        }
        for t in s.tokens() {
            out.extend_from_slice(&(t as u16).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_sequences(path: impl AsRef<Path>) -> Result<(usize, Vec<SeqSample>)> {
    let bytes = std::fs::read(path)?;
    let mut r = Cursor::new(&bytes);
    r.magic(b"SEQD")?;
    r.version()?;
    let p = r.u32()? as usize;
    if p == 0 || p > PAYLOAD_BASE {
        return Err(Error::Format(format!("perm_len {p} out of range")));
    }
    let count = r.u64()? as usize;
    let width = 3 * p + 1;
    let need = count.checked_mul(width * 2).ok_or_else(|| Error::Format("record count overflow".into()))?;
    if r.remaining() != need {
        return Err(if r.remaining() < need {
            Error::Truncated(format!("{count} sequence records"))
        } else {
            Error::Format("trailing bytes after sequence records".into())
        });
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let toks: Vec<usize> = (0..width).map(|_| r.u16().map(usize::from)).collect::<Result<_>>()?;
        if toks[..p].iter().any(|&i| i >= p) {
            return Err(Error::Format("permutation index out of range".into()));
        }
        let s = SeqSample::from_parts(toks[..p].to_vec(), toks[p..2 * p].to_vec());
        if s.tokens() != toks {
            return Err(Error::Format("inconsistent sequence record".into()));
        }
        out.push(s);
    }
    Ok((p, out))
}

// ---------------------------------------------------------------- reaching

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReachConfig {
    pub grid: usize,
    pub episode_len: usize,
    pub horizon: usize,
    pub gain: f64,
    pub success_radius: f64,
    /// Gaussian width (in cells) of the painted agent and goal.
    pub sigma: f64,
}

impl Default for ReachConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            episode_len: 40,
            horizon: 7,
            gain: 0.1,
            success_radius: 0.05,
            sigma: 0.8,
        }
    }
}

pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;
pub const INSTR_LEN: usize = 2;

impl ReachConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 3 || self.grid > 64 {
            return Err(Error::contract("grid must be in 3..=64"));
        }
        if self.episode_len <= self.horizon {
            return Err(Error::contract("episode_len must exceed horizon"));
        }
        if !(self.gain > 0.0 && self.success_radius > 0.0 && self.sigma > 0.0) {
            return Err(Error::contract("gain, success_radius and sigma must be positive"));
        }
        Ok(())
    }

    /// Instruction vocabulary: x bins then y bins.
    pub fn instr_vocab(&self) -> usize {
        2 * self.grid
    }
}

/// What the policy sees at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Row-major `grid × grid` intensities scaled by 255.
    pub image: Vec<u8>,
    pub state: [f64; STATE_DIM],
    pub instruction: [u16; INSTR_LEN],
}

impl Observation {
    pub fn pixels(&self) -> impl Iterator<Item = f64> + '_ {
        self.image.iter().map(|&p| p as f64 / 255.0)
    }
}

/// `h+1` consecutive actions, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub horizon: usize,
    pub dim: usize,
    pub actions: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, dim: usize, actions: Vec<f64>) -> Result<Self> {
        if actions.len() != (horizon + 1) * dim {
            return Err(Error::shape("action chunk", &[horizon + 1, dim], &[actions.len()]));
        }
        Ok(Self { horizon, dim, actions })
    }

    pub fn len(&self) -> usize {
        self.horizon + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.actions[k * self.dim..(k + 1) * self.dim]
    }
}

/// Proportional controller clipped to `[-1, 1]`.
pub fn expert_action(pos: [f64; 2], goal: [f64; 2], gain: f64) -> [f64; 2] {
    [0, 1].map(|i| (gain * (goal[i] - pos[i])).clamp(-1.0, 1.0))
}

/// Point in the unit square. Goals sit at grid-cell centers so the two
/// instruction tokens specify them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ReachEnv {
    pub config: ReachConfig,
    pub pos: [f64; 2],
    pub goal: [f64; 2],
    pub goal_cell: [usize; 2],
    pub t: usize,
}

impl ReachEnv {
    pub fn reset(config: ReachConfig, rng: &mut impl Rng) -> Self {
        let pos = [rng.random::<f64>(), rng.random::<f64>()];
        let goal_cell = [rng.random_range(0..config.grid), rng.random_range(0..config.grid)];
        let goal = goal_cell.map(|c| (c as f64 + 0.5) / config.grid as f64);
        Self {
            config,
            pos,
            goal,
            goal_cell,
            t: 0,
        }
    }

    pub fn distance(&self) -> f64 {
        ((self.pos[0] - self.goal[0]).powi(2) + (self.pos[1] - self.goal[1]).powi(2)).sqrt()
    }

    pub fn done(&self) -> bool {
        self.t >= self.config.episode_len
    }

    pub fn success(&self) -> bool {
        self.distance() < self.config.success_radius
    }

    /// Applies a velocity clipped to `[-1, 1]`; the position stays in the
    /// unit square.
    pub fn step(&mut self, a: &[f64]) -> Result<()> {
        if a.len() != ACTION_DIM || a.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("action must be two finite values"));
        }
        if self.done() {
            return Err(Error::contract("episode already finished"));
        }
        for i in 0..2 {
            self.pos[i] = (self.pos[i] + a[i].clamp(-1.0, 1.0)).clamp(0.0, 1.0);
        }
        self.t += 1;
        Ok(())
    }

    pub fn observe(&self) -> Observation {
        let g = self.config.grid;
        Observation {
            image: render(g, self.config.sigma, self.pos, self.goal),
            state: self.pos,
            instruction: [self.goal_cell[0] as u16, (g + self.goal_cell[1]) as u16],
        }
    }

    /// Expert chunk of `h+1` actions from the current state.
    pub fn expert_chunk(&self, horizon: usize) -> ActionChunk {
        let mut sim = self.clone();
        let mut actions = Vec::with_capacity((horizon + 1) * ACTION_DIM);
        for _ in 0..=horizon {
            let a = expert_action(sim.pos, sim.goal, sim.config.gain);
            actions.extend(a);
            for i in 0..2 {
                sim.pos[i] = (sim.pos[i] + a[i]).clamp(0.0, 1.0);
            }
        }
        ActionChunk {
            horizon,
            dim: ACTION_DIM,
            actions,
        }
    }
}

/// Paints agent and goal as 3×3 Gaussian blobs (max-combined) on the grid.
pub fn render(grid: usize, sigma: f64, agent: [f64; 2], goal: [f64; 2]) -> Vec<u8> {
    let mut img = vec![0.0f64; grid * grid];
    for p in [agent, goal] {
        let cx = p[0] * grid as f64;
        let cy = p[1] * grid as f64;
        let ix = (cx.floor() as isize).clamp(0, grid as isize - 1);
        let iy = (cy.floor() as isize).clamp(0, grid as isize - 1);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (x, y) = (ix + dx, iy + dy);
                if x < 0 || y < 0 || x >= grid as isize || y >= grid as isize {
                    continue;
                }
                let ddx = x as f64 + 0.5 - cx;
                let ddy = y as f64 + 0.5 - cy;
                let v = (-(ddx * ddx + ddy * ddy) / (2.0 * sigma * sigma)).exp();
                let cell = &mut img[y as usize * grid + x as usize];
                *cell = cell.max(v);
            }
        }
    }
    img.into_iter().map(|v| (v * 255.0).round() as u8).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub episode: u32,
    pub step: u32,
    pub obs: Observation,
    pub chunk: ActionChunk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub config: ReachConfig,
    /// Per-dimension `(min, max)` action calibration written into the file.
    pub ranges: Vec<(f64, f64)>,
    pub records: Vec<TrajectoryRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertStats {
    pub episodes: usize,
    pub successes: usize,
}

/// Rolls out the expert for `episodes` episodes, emitting one record per step
/// that still has a full chunk inside the episode.
pub fn gen_reach_dataset(config: &ReachConfig, episodes: usize, seed: u64) -> Result<(TrajectoryDataset, ExpertStats)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.horizon;
    let mut records = Vec::new();
    let mut successes = 0;
    for ep in 0..episodes {
        let mut env = ReachEnv::reset(*config, &mut rng);
        while !env.done() {
            if env.t + h < config.episode_len {
                records.push(TrajectoryRecord {
                    episode: ep as u32,
                    step: env.t as u32,
                    obs: env.observe(),
                    chunk: env.expert_chunk(h),
                });
            }
            let a = expert_action(env.pos, env.goal, config.gain);
            env.step(&a)?;
        }
        successes += env.success() as usize;
    }
    let all: Vec<f64> = records.iter().flat_map(|r| r.chunk.actions.iter().copied()).collect();
    let ranges = (0..ACTION_DIM)
        .map(|d| {
            let col: Vec<f64> = all.iter().skip(d).step_by(ACTION_DIM).copied().collect();
            (percentile(&col, 0.01), percentile(&col, 0.99))
        })
        .collect();
    Ok((
        TrajectoryDataset {
            config: *config,
            ranges,
            records,
        },
        ExpertStats { episodes, successes },
    ))
}

/// Nearest-rank percentile (`q` in `[0, 1]`); 0 for empty input.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = (q.clamp(0.0, 1.0) * (v.len() - 1) as f64).round() as usize;
    v[idx]
}

impl TrajectoryDataset {
    fn record_bytes(&self) -> usize {
        let g = self.config.grid;
        8 + g * g + STATE_DIM * 8 + INSTR_LEN * 2 + (self.config.horizon + 1) * ACTION_DIM * 8
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let c = &self.config;
        w.write_all(b"TRAJ")?;
        for v in [FILE_VERSION, ACTION_DIM as u32, c.horizon as u32, c.grid as u32, INSTR_LEN as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &(lo, hi) in &self.ranges {
            w.write_all(&lo.to_le_bytes())?;
            w.write_all(&hi.to_le_bytes())?;
        }
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.record_bytes());
        for r in &self.records {
            buf.clear();
            buf.extend_from_slice(&r.episode.to_le_bytes());
            buf.extend_from_slice(&r.step.to_le_bytes());
            if r.obs.image.len() != c.grid * c.grid || r.chunk.actions.len() != (c.horizon + 1) * ACTION_DIM {
                return Err(Error::contract("record does not match dataset header"));
            }
            buf.extend_from_slice(&r.obs.image);
            for v in r.obs.state {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for t in r.obs.instruction {
                buf.extend_from_slice(&t.to_le_bytes());
            }
            for v in &r.chunk.actions {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads a trajectory file. Fields not stored in the header (episode
    /// length, gain, ...) are taken from `base`.
    pub fn read(path: impl AsRef<Path>, base: ReachConfig) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, base)
    }

    pub fn from_bytes(bytes: &[u8], base: ReachConfig) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        r.magic(b"TRAJ")?;
        r.version()?;
        let d = r.u32()? as usize;
        let h = r.u32()? as usize;
        let grid = r.u32()? as usize;
        let il = r.u32()? as usize;
        if d != ACTION_DIM || il != INSTR_LEN || !(3..=64).contains(&grid) || h > 1024 {
            return Err(Error::Format(format!("unsupported trajectory layout d={d} h={h} grid={grid} instr={il}")));
        }
        let ranges = (0..d).map(|_| Ok((r.f64()?, r.f64()?))).collect::<Result<Vec<_>>>()?;
        let count = r.u64()? as usize;
        let config = ReachConfig { grid, horizon: h, ..base };
        let mut ds = Self {
            config,
            ranges,
            records: Vec::new(),
        };
        let need = count
            .checked_mul(ds.record_bytes())
            .ok_or_else(|| Error::Format("record count overflow".into()))?;
        if r.remaining() < need {
            return Err(Error::Truncated(format!("{count} trajectory records")));
        }
        if r.remaining() > need {
            return Err(Error::Format("trailing bytes after trajectory records".into()));
        }
        ds.records.reserve(count);
        for _ in 0..count {
            let episode = r.u32()?;
            let step = r.u32()?;
            let image = r.take(grid * grid)?.to_vec();
            let state = [r.f64()?, r.f64()?];
            let instruction = [r.u16()?, r.u16()?];
            let actions = (0..(h + 1) * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            ds.records.push(TrajectoryRecord {
                episode,
                step,
                obs: Observation {
                    image,
                    state,
                    instruction,
                },
                chunk: ActionChunk { horizon: h, dim: d, actions },
            });
        }
        Ok(ds)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(format!("{n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        if self.take(4)? != m {
            return Err(Error::Format(format!("bad magic, expected {}", String::from_utf8_lossy(m))));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FILE_VERSION {
            return Err(Error::Version {
                found: v,
                expected: FILE_VERSION,
            });
        }
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
