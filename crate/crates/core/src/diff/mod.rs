//! Minimal reverse-mode differentiable kernel: dense f64 arrays, a recording
//! tape, a named parameter store with Adam, and finite-difference checking.

mod array;
mod gradcheck;
mod params;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::{ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape contract violation in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for buffer of {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward already ran on this tape; build a new tape to reset")]
    BackwardTwice,
    #[error("backward seed must be a scalar, got shape {shape:?}")]
    NonScalarSeed { shape: Vec<usize> },
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("NaN gradient in parameter {0}; step aborted")]
    NanGradient(String),
    #[error("loss is not deterministic: {a} vs {b} for identical inputs")]
    NonDeterministic { a: f64, b: f64 },
    #[error("unknown primitive {0}")]
    UnknownPrimitive(String),
    #[error("gather index {idx} out of bounds for {rows} rows")]
    IndexOutOfBounds { idx: usize, rows: usize },
}
