//! Minimal dense tensor library with reverse-mode gradients.
//!
//! Values are `f64` row-major arrays ([`Tensor`]). Computation is recorded on
//! a [`Tape`]; each kernel method appends a node and returns a [`Var`]
//! handle. [`Tape::backward`] fills gradients for every grad-requiring leaf.
//! The [`gradcheck`] module holds the central finite-difference oracle used
//! to verify every backward rule; [`suite`] runs it once per operation.
//!
//! With `debug_assertions` on, every kernel output is scanned for NaN/±inf
//! (only [`Tape::add_mask`] may emit `-inf`).

mod error;
mod gemm;
pub mod gradcheck;
pub mod suite;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{softmax_rows, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
