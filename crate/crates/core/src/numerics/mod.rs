//! Dense `f32` tensors and a reverse-mode tape.

mod gemm;
pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{rope_tables, NodeId, RopeLayout, Tape, Var};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LAYERNORM_EPS: f32 = 1e-5;
