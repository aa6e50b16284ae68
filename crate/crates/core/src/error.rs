use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty supervision: the loss mask selects no positions")]
    EmptySupervision,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("corrupt packed data: reserved code 0b10 at byte offset {offset}")]
    Corrupt { offset: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated input while reading {0}")]
    Truncated(String),

    #[error("unknown blob `{0}`")]
    UnknownBlob(String),

    #[error("missing blob `{0}`")]
    MissingBlob(String),

    #[error("non-finite loss at step {step}: lm={lm_loss} aux={aux_loss} total={total_loss}")]
    Diverged {
        step: usize,
        lm_loss: f64,
        aux_loss: f64,
        total_loss: f64,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
