//! Graph data model, dataset file I/O, adjacency normalization, and
//! synthetic out-of-distribution split generation.

mod io;
mod sbm;
mod splits;
mod store;

pub use io::{load_dataset, save_dataset};
pub use sbm::make_synthetic_sbm;
pub use splits::{
    apply_orthogonal_shift, apply_shift_with, make_degree_concept_split, sample_partial_rotation,
    sample_planar_rotation,
};
pub use store::{normalize, Graph, NormalizedAdjacency, SplitMasks};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },

    #[error("{file}:{line}: node index {index} out of range (n = {n})")]
    IndexOutOfRange { file: String, line: usize, index: usize, n: usize },

    #[error("node {node} appears in both `{a}` and `{b}` masks")]
    MaskOverlap { node: usize, a: &'static str, b: &'static str },

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("labels must lie in [0, {num_classes}), found {label}")]
    LabelOutOfRange { label: i64, num_classes: usize },

    #[error(transparent)]
    Kernel(#[from] crate::kernel::KernelError),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}
