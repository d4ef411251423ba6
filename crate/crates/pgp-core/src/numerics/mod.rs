//! Dense 64-bit matrix algebra with a reverse-mode gradient tape.
//!
//! Everything trainable in the fusion head and losses runs through [`Tape`];
//! plain [`Matrix`] values cover the non-differentiable paths (graph
//! construction, evaluation). Matrices here are tiny, so clarity and exact
//! reproducibility win over speed: plain row-major `f64`, no parallelism, no
//! caching.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{Gradients, NodeId, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("backward requires a 1x1 loss node, got {rows}x{cols}")]
    LossNotScalar { rows: usize, cols: usize },
    #[error("empty matrix not allowed in {op}")]
    Empty { op: &'static str },
}

pub type Result<T> = std::result::Result<T, NumericsError>;
