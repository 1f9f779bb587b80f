//! Numeric substrate: dense and sparse linear algebra, reverse-mode
//! differentiation over a dynamic tape, Adam with an orthogonality retraction
//! hook, and deterministic splittable randomness.

mod adam;
mod dense;
mod eigen;
mod ortho;
mod rng;
mod sparse;
mod tape;

pub use adam::{AdamState, ParamRef, ParamStore};
pub use dense::{softmax_rows, DenseMatrix};
pub use eigen::sym_eigen;
pub use ortho::{gram_residual, haar_orthogonal, qr_reorthogonalize, random_orthonormal_rows};
pub use rng::{RngKey, RngStream};
pub use sparse::SparseAdjacency;
pub use tape::{Gradients, Tape, VarId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: non-finite value")]
    NotFinite { op: &'static str },

    #[error("backward requires a scalar output, got {shape:?}")]
    NonScalarOutput { shape: (usize, usize) },

    #[error("non-finite gradient for parameter `{param}`")]
    NanGradient { param: String },

    #[error("rank-deficient basis: row {row} has no independent component")]
    DegenerateBasis { row: usize },
}
