//! Ternary-weight / INT8-activation numerics.
//!
//! The crate covers the full stack: a small reverse-mode autodiff [`Tape`],
//! absmean/absmax quantizers with straight-through fake-quant forms, a 2-bit
//! packed ternary codec, exact integer kernels with operation counters,
//! transformer blocks with dual (fake-quant / packed) execution, the
//! distillation objective and trainer, and a chunked action policy for a toy
//! reaching task.

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod kernel;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod pack;
pub mod policy;
pub mod quant;
pub mod tape;
pub mod tensor;

pub use checkpoint::{memory_total, Checkpoint, LayerMemory};
pub use error::{Error, Result};
pub use kernel::{counters_reset, counters_snapshot, gemv_fast, gemv_ref, linear_forward, OpCounters};
pub use loss::{action_l1_loss, aux_loss, lm_loss, total_loss, LossWeights};
pub use nn::{EncoderConfig, Graph, Mode, Module, Param, QuantLinear, SeqModel};
pub use optim::{OptimConfig, OptimKind, Optimizer};
pub use pack::{memory_report, MemoryReport, PackedTernaryMatrix};
pub use quant::{fake_quant_acts, fake_quant_weights, quantize_acts, quantize_weights, round_clip, Int8Acts, TernaryQuant};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
