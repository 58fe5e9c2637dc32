//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Sized for the small MLPs in the relational model: everything is a row-major
//! `f64` matrix, matmuls go through `matrixmultiply`, and each forward pass is
//! recorded on a fresh [`Graph`].

mod check;
mod checkpoint;
mod graph;
mod optim;
mod tensor;

pub use check::gradcheck;
pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{
    concat_cols, concat_rows, elu, pairwise_sum, softplus, BatchStats, Gradients, Graph, Var,
};
pub use optim::{Adam, AdamConfig, StepHalving};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in `{op}`: {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("{len} values cannot fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("column slice {start}..{end} out of range for shape {shape:?}")]
    Slice {
        start: usize,
        end: usize,
        shape: Vec<usize>,
    },
    #[error("row index {index} out of range for {rows} rows")]
    Index { index: usize, rows: usize },
    #[error("`{0}` needs at least one input")]
    Empty(&'static str),
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("expected {expected} parameter tensors, got {got}")]
    ParamCount { expected: usize, got: usize },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        TensorError::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }
}
