//! Dense tensors with a tape-based reverse-mode differentiator.
//!
//! The op set is exactly what the ConvMixer needs. Every reduction sums in a
//! fixed row-major order starting from zero, with any bias added last, so
//! naive loop oracles written in the same order agree bit for bit.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, numeric_gradient, op_gradient_report, relative_error};
pub use ops::{BatchNormStats, NormMode};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
