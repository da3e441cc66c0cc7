//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Build a [`Graph`] per forward pass, load parameters from a
//! [`ParamStore`], call [`Graph::backward`] on a scalar loss and hand the
//! gradients to [`AdamState::step`].

pub mod checkpoint;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{pinball, sigmoid, softplus, Gradients, Graph, Var};
pub use optim::AdamState;
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("buffer of length {len} does not match shape {shape:?}")]
    BufferLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range ({len}) in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
