//! Binary checkpoint format.
//!
//! ```text
//! magic      b"TERN"
//! version    u32
//! header_len u32, then a JSON header {kind, mode, config}
//! count      u32, then `count` blobs:
//!   name_len u16, name (utf-8), tag u8
//!   tag 0 (dense):  ndim u32, dims u64 × ndim, f64 × prod(dims)
//!   tag 1 (packed): rows u64, cols u64, alpha f64, row-padded 2-bit codes
//! ```
//!
//! All integers and floats are little-endian. Inference checkpoints store the
//! quantized linears only in packed form; their master weights are dropped.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderConfig, Mode, Module, SeqModel};
use crate::pack::{row_bytes, PackedTernaryMatrix};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TERN";
pub const VERSION: u32 = 1;

const TAG_DENSE: u8 = 0;
const TAG_PACKED: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub mode: Mode,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Blob {
    Dense(Tensor),
    Packed(PackedTernaryMatrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub blobs: Vec<(String, Blob)>,
}

impl Checkpoint {
    /// Snapshot of `model` in its current mode.
    pub fn capture<M: Module + ?Sized>(kind: &str, config: serde_json::Value, model: &M) -> Result<Self> {
        let mode = model.mode();
        let mut blobs = Vec::new();
        let packed_names: Vec<String> = if mode == Mode::Inference {
            model.quantized_param_names()
        } else {
            Vec::new()
        };
        for p in model.params() {
            if !packed_names.contains(&p.name) {
                blobs.push((p.name.clone(), Blob::Dense(p.value.clone())));
            }
        }
        for ql in model.quant_linears() {
            if packed_names.contains(&ql.name) {
                let packed = ql
                    .packed
                    .clone()
                    .ok_or_else(|| Error::contract(format!("{} is not packed", ql.name)))?;
                blobs.push((ql.name.clone(), Blob::Packed(packed)));
            }
        }
        Ok(Self {
            header: Header {
                kind: kind.to_string(),
                mode,
                config,
            },
            blobs,
        })
    }

    /// Loads parameters into a freshly built model of the matching
    /// architecture.
    pub fn restore<M: Module + ?Sized>(&self, model: &mut M) -> Result<()> {
        let mut blobs: BTreeMap<&str, &Blob> = BTreeMap::new();
        for (name, blob) in &self.blobs {
            if blobs.insert(name, blob).is_some() {
                return Err(Error::Format(format!("duplicate blob {name}")));
            }
        }
        let inference = self.header.mode == Mode::Inference;
        let packed_names = if inference {
            model.quantized_param_names()
        } else {
            Vec::new()
        };
        for p in model.params_mut() {
            if packed_names.contains(&p.name) {
                continue;
            }
            match blobs.remove(p.name.as_str()) {
                Some(Blob::Dense(t)) if t.shape() == p.value.shape() => p.value = t.clone(),
                Some(Blob::Dense(t)) => {
                    return Err(Error::Format(format!(
                        "blob {} has shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )))
                }
                Some(Blob::Packed(_)) => return Err(Error::Format(format!("blob {} should be dense", p.name))),
                None => return Err(Error::MissingBlob(p.name.clone())),
            }
        }
        for ql in model.quant_linears_mut() {
            if !inference {
                ql.mode = Mode::Training;
                ql.packed = None;
                continue;
            }
            if packed_names.contains(&ql.name) {
                match blobs.remove(ql.name.as_str()) {
                    Some(Blob::Packed(m)) if m.rows() == ql.out_dim && m.cols() == ql.in_dim => {
                        ql.packed = Some(m.clone());
                        ql.weight = None;
                    }
                    Some(_) => return Err(Error::Format(format!("blob {} has the wrong layout", ql.name))),
                    None => return Err(Error::MissingBlob(ql.name.clone())),
                }
            }
            ql.mode = Mode::Inference;
        }
        if let Some(name) = blobs.keys().next() {
            return Err(Error::UnknownBlob(name.to_string()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&len_u32(header.len())?.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&len_u32(self.blobs.len())?.to_le_bytes());
        for (name, blob) in &self.blobs {
            let n = u16::try_from(name.len()).map_err(|_| Error::contract(format!("blob name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match blob {
                Blob::Dense(t) => {
                    out.push(TAG_DENSE);
                    out.extend_from_slice(&len_u32(t.shape().len())?.to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Blob::Packed(m) => {
                    out.push(TAG_PACKED);
                    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
                    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
                    out.extend_from_slice(&m.alpha().to_le_bytes());
                    out.extend_from_slice(m.bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen, "header")?)?;
        let count = r.u32("blob count")? as usize;
        let mut blobs = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16("blob name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "blob name")?)
                .map_err(|_| Error::Format("blob name is not utf-8".into()))?
                .to_string();
            let blob = match r.u8("blob tag")? {
                TAG_DENSE => {
                    let ndim = r.u32("ndim")? as usize;
                    let mut dims = Vec::with_capacity(ndim.min(8));
                    for _ in 0..ndim {
                        dims.push(r.u64("dim")? as usize);
                    }
                    let count = dims
                        .iter()
                        .try_fold(1usize, |a, &d| a.checked_mul(d))
                        .filter(|&c| c.checked_mul(8).is_some())
                        .ok_or_else(|| Error::Format(format!("blob {name} dims overflow")))?;
                    let raw = r.take(count * 8, &name)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Blob::Dense(Tensor::new(&dims, data).map_err(|e| Error::Format(format!("blob {name}: {e}")))?)
                }
                TAG_PACKED => {
                    let rows = r.u64("rows")? as usize;
                    let cols = r.u64("cols")? as usize;
                    let alpha = f64::from_le_bytes(r.take(8, "alpha")?.try_into().unwrap());
                    let len = rows
                        .checked_mul(row_bytes(cols))
                        .ok_or_else(|| Error::Format(format!("blob {name} dims overflow")))?;
                    let start = r.pos;
                    let raw = r.take(len, &name)?.to_vec();
                    let m = PackedTernaryMatrix::from_bytes(rows, cols, raw, alpha).map_err(|e| match e {
                        Error::Corrupt { offset } => Error::Corrupt { offset: start + offset },
                        other => other,
                    })?;
                    Blob::Packed(m)
                }
                tag => return Err(Error::UnknownBlob(format!("{name} (tag {tag})"))),
            };
            blobs.push((name, blob));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { header, blobs })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.header.config.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind == kind {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "checkpoint holds a {} model, expected {kind}",
                self.header.kind
            )))
        }
    }
}

/// Stored size of one checkpoint entry next to dense baselines of the same
/// element count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMemory {
    pub name: String,
    pub shape: Vec<usize>,
    pub packed: bool,
    pub bytes: u64,
    pub f16_bytes: u64,
    pub f32_bytes: u64,
    pub f64_bytes: u64,
}

impl LayerMemory {
    pub fn ratio_vs(&self, baseline: u64) -> f64 {
        baseline as f64 / self.bytes.max(1) as f64
    }
}

/// Sum of a memory table; its `name` is `"total"`.
pub fn memory_total(rows: &[LayerMemory]) -> LayerMemory {
    let mut t = LayerMemory {
        name: "total".into(),
        shape: Vec::new(),
        packed: rows.iter().any(|r| r.packed),
        bytes: 0,
        f16_bytes: 0,
        f32_bytes: 0,
        f64_bytes: 0,
    };
    for r in rows {
        t.bytes += r.bytes;
        t.f16_bytes += r.f16_bytes;
        t.f32_bytes += r.f32_bytes;
        t.f64_bytes += r.f64_bytes;
    }
    t
}

impl Checkpoint {
    /// Parameter payload bytes per blob. Packed blobs count their codes plus
    /// the scale; dense blobs count `f64` storage.
    pub fn memory_table(&self) -> Vec<LayerMemory> {
        self.blobs
            .iter()
            .map(|(name, blob)| {
                let (shape, packed, bytes) = match blob {
                    Blob::Dense(t) => (t.shape().to_vec(), false, 8 * t.len() as u64),
                    Blob::Packed(m) => (vec![m.rows(), m.cols()], true, m.storage_bytes() as u64),
                };
                let n = shape.iter().product::<usize>() as u64;
                LayerMemory {
                    name: name.clone(),
                    shape,
                    packed,
                    bytes,
                    f16_bytes: 2 * n,
                    f32_bytes: 4 * n,
                    f64_bytes: 8 * n,
                }
            })
            .collect()
    }
}

pub const KIND_SEQ: &str = "sequence";

impl SeqModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(KIND_SEQ, serde_json::to_value(self.config)?, self)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(KIND_SEQ)?;
        let config: EncoderConfig = ckpt.config()?;
        let mut model = SeqModel::new(config, 0)?;
        ckpt.restore(&mut model)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::contract("length exceeds u32"))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("{what} at byte {}", self.pos))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
