//! Dense arrays with tape-based reverse-mode differentiation.
//!
//! Every primitive records an [`Op`](tape) with an analytic backward rule.
//! Parameters live in a [`ParamSet`] and are bound onto a [`Tape`] as
//! borrowed leaves, so distinct tapes may read the same parameters
//! concurrently while training mutates them between steps.

mod array;
mod gradcheck;
mod params;
mod tape;

pub use array::DenseArray;
pub use gradcheck::{gradient_check, GradCheckReport};
pub use params::{ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: empty index list")]
    EmptyIndex { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("loss is not finite after perturbing {param}[{index}] by {delta:e}")]
    NonFiniteLoss { param: String, index: usize, delta: f64 },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}
