//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records primitive applications; [`Tape::backward`] sweeps it in
//! reverse. Parameters live in a [`ParamSet`] and are bound onto a fresh tape
//! for every optimizer step.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    check_gradients, check_gradients_at, relative_error, scaled_relative_error, GradCheckReport, GRADIENT_SCALE_FLOOR,
    RELATIVE_ERROR_FLOOR,
};
pub use optim::{clip_global_norm, AdamConfig, AdamState};
pub use params::ParamSet;
pub use tape::{Gradients, Primitive, Tape, Var};
pub(crate) use tape::log_softmax_rows;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("{op}: index {index} out of range for size {bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("node is detached from this tape or carries no gradient")]
    Detached,
    #[error("parameter layout mismatch: expected {expected}, got {got}")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("learning-rate schedule exhausted at step {step} of {total}")]
    ScheduleExhausted { step: usize, total: usize },
    #[error("finite-difference step must be > 0, got {0}")]
    InvalidStep(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
