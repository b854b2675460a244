//! Tensor arithmetic, reverse-mode differentiation, Adam and gradient checking.
//!
//! Everything the learned components train on lives here. Values are `f64`
//! throughout; forward ops refuse to produce non-finite output so that a
//! diverging run fails at the op that diverged instead of later.

mod adam;
mod checkpoint;
mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::finite_diff_check;
pub use params::{ParamEntry, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape product {product} does not match {len} values")]
    ShapeMismatch { product: usize, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Incompatible {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tensor {0} is not on this tape")]
    UnknownVar(usize),
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
