//! Dense matrices and a reverse-mode differentiation tape.
//!
//! [`Matrix`] is a plain row-major `f64` matrix. [`Graph`] records the
//! operations of one forward pass and replays them backwards to produce
//! gradients for every leaf marked trainable. Graphs are rebuilt per forward
//! pass and are single-threaded; separate graphs are independent.
//!
//! The free functions in [`ops`] are the non-recording forward definitions
//! used both by the tape and by inference code that does not need gradients.

mod gradcheck;
mod graph;
mod matrix;
pub mod ops;

pub use gradcheck::{grad_check, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{CustomBackward, Gradients, Graph, Var};
pub use matrix::{read_named, write_named, Matrix};

/// Variance epsilon used by [`ops::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Rows with Euclidean norm below this are rejected by [`ops::l2_normalize_rows`].
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {}x{} and {}x{}", left.0, left.1, right.0, right.1)]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("matrix {rows}x{cols} cannot hold {len} values")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("l2_normalize_rows: row {row} has degenerate norm {norm:e}")]
    DegenerateRow { row: usize, norm: f64 },
    #[error("{op}: value outside the domain: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl TensorError {
    pub(crate) fn rename(self, name: &'static str) -> Self {
        match self {
            TensorError::Shape { left, right, .. } => TensorError::Shape { op: name, left, right },
            other => other,
        }
    }
}
