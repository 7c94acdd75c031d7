//! Dense row-major tensors (rank ≤ 4) with reverse-mode automatic
//! differentiation recorded on an explicit [`Tape`].
//!
//! The design favours auditability over generality: every operator is a named
//! variant with a hand-written backward rule, there is no broadcasting beyond
//! a leading batch dimension, and all accumulation orders are fixed so that a
//! given graph produces bit-identical results on every run.  `f32` is the
//! working element type; `f64` is supported so gradients can be verified
//! against central finite differences at tight tolerances (see [`grad_check`]).

mod adam;
mod check;
mod tape;
mod tensor;

pub use adam::{clip_global_norm, global_norm, AdamConfig, AdamState, ParamRef};
pub use check::{grad_check, GradCheckReport, FD_STEP};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

/// Errors surfaced while building a graph or stepping the optimizer.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: rank {rank} exceeds the supported maximum of 4")]
    RankOverflow { op: &'static str, rank: usize },
    #[error("backward requires a scalar loss, got shape {got}")]
    NonScalarLoss { got: String },
    #[error("{op}: index {index} out of bounds for dimension of size {size}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("gradient for parameter `{param}` is not finite")]
    NanGradient { param: String },
}

pub type Result<T> = std::result::Result<T, Error>;

fn shape_string(dims: &[usize]) -> String {
    let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
    format!("[{}]", parts.join(", "))
}
