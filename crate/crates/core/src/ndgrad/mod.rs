//! Dense `f32` tensors with define-by-run reverse-mode differentiation.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{BnMode, BnSettings, Gradients, RunningStats, Tape, Var};
pub use tensor::Tensor;
