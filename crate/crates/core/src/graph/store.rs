//! Core graph data types and adjacency normalization.

use std::sync::Arc;

use crate::kernel::{DenseMatrix, KernelError, SparseAdjacency};

use super::GraphError;

/// An attributed graph for node classification. The raw adjacency is
/// symmetric with no self-loops; labels are class indices in `[0, C)`.
#[derive(Debug, Clone)]
pub struct Graph {
    pub adj: SparseAdjacency,
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Graph {
    pub fn new(
        adj: SparseAdjacency,
        features: DenseMatrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, GraphError> {
        let n = adj.n();
        if features.rows() != n {
            return Err(KernelError::ShapeMismatch {
                op: "graph_new",
                detail: format!("{} feature rows for {n} nodes", features.rows()),
            }
            .into());
        }
        if labels.len() != n {
            return Err(KernelError::ShapeMismatch {
                op: "graph_new",
                detail: format!("{} labels for {n} nodes", labels.len()),
            }
            .into());
        }
        for &l in &labels {
            if l >= num_classes {
                return Err(GraphError::LabelOutOfRange { label: l as i64, num_classes });
            }
        }
        for i in 0..n {
            if adj.has_entry(i, i) {
                return Err(GraphError::DegenerateSplit(format!(
                    "raw adjacency has a self-loop at node {i}"
                )));
            }
        }
        if !features.all_finite() {
            return Err(KernelError::NotFinite { op: "graph_new" }.into());
        }
        Ok(Graph { adj, features, labels, num_classes })
    }

    /// Build the raw adjacency from an undirected edge list: duplicates are
    /// collapsed, both directions stored, self-loops dropped.
    pub fn adjacency_from_edges(n: usize, edges: &[(usize, usize)]) -> Result<SparseAdjacency, KernelError> {
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in edges {
            if u == v {
                continue;
            }
            pairs.push((u, v));
            pairs.push((v, u));
        }
        pairs.sort_unstable();
        pairs.dedup();
        let entries: Vec<(usize, usize, f64)> = pairs.iter().map(|&(u, v)| (u, v, 1.0)).collect();
        SparseAdjacency::from_entries(n, &entries)
    }

    pub fn n(&self) -> usize {
        self.adj.n()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj.row_len(i)
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.adj.nnz() / 2
    }
}

/// Disjoint boolean node masks for the source/validation/target phases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMasks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl SplitMasks {
    pub fn new(train: Vec<bool>, val: Vec<bool>, test: Vec<bool>) -> Result<Self, GraphError> {
        let n = train.len();
        if val.len() != n || test.len() != n {
            return Err(KernelError::ShapeMismatch {
                op: "split_masks",
                detail: "mask lengths differ".into(),
            }
            .into());
        }
        for i in 0..n {
            if train[i] && val[i] {
                return Err(GraphError::MaskOverlap { node: i, a: "train", b: "val" });
            }
            if train[i] && test[i] {
                return Err(GraphError::MaskOverlap { node: i, a: "train", b: "test" });
            }
            if val[i] && test[i] {
                return Err(GraphError::MaskOverlap { node: i, a: "val", b: "test" });
            }
        }
        for (name, mask) in [("train", &train), ("val", &val), ("test", &test)] {
            if !mask.iter().any(|&b| b) {
                return Err(GraphError::DegenerateSplit(format!("{name} mask is empty")));
            }
        }
        Ok(SplitMasks { train, val, test })
    }

    pub fn from_indices(
        n: usize,
        train: &[usize],
        val: &[usize],
        test: &[usize],
    ) -> Result<Self, GraphError> {
        let build = |idx: &[usize]| -> Vec<bool> {
            let mut m = vec![false; n];
            for &i in idx {
                if i < n {
                    m[i] = true;
                }
            }
            m
        };
        for &i in train.iter().chain(val).chain(test) {
            if i >= n {
                return Err(GraphError::IndexOutOfRange {
                    file: "<split>".into(),
                    line: 0,
                    index: i,
                    n,
                });
            }
        }
        Self::new(build(train), build(val), build(test))
    }

    pub fn indices(mask: &[bool]) -> Vec<usize> {
        mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        Self::indices(&self.train)
    }

    pub fn val_indices(&self) -> Vec<usize> {
        Self::indices(&self.val)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        Self::indices(&self.test)
    }
}

/// Symmetrically normalized adjacency with self-loops,
/// `D^{-1/2} (A + I) D^{-1/2}`, shared cheaply across forward passes.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    csr: Arc<SparseAdjacency>,
}

impl NormalizedAdjacency {
    pub fn csr(&self) -> &Arc<SparseAdjacency> {
        &self.csr
    }

    pub fn n(&self) -> usize {
        self.csr.n()
    }
}

/// Symmetric normalization with self-loops. Isolated nodes end up with a
/// single self-loop of weight 1.
pub fn normalize(adj: &SparseAdjacency) -> NormalizedAdjacency {
    let n = adj.n();
    let mut degree = vec![1.0f64; n]; // self-loop contributes 1
    for (i, d) in degree.iter_mut().enumerate() {
        let (_, vals) = adj.row(i);
        *d += vals.iter().sum::<f64>();
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(adj.nnz() + n);
    for i in 0..n {
        entries.push((i, i, inv_sqrt[i] * inv_sqrt[i]));
        let (idx, vals) = adj.row(i);
        for (&j, &v) in idx.iter().zip(vals) {
            if j != i {
                entries.push((i, j, v * inv_sqrt[i] * inv_sqrt[j]));
            }
        }
    }
    let csr = SparseAdjacency::from_entries(n, &entries)
        .expect("normalization preserves CSR validity");
    debug_assert!(csr.is_symmetric());
    debug_assert!(csr.spectral_radius_estimate(30) <= 1.0 + 1e-9);
    NormalizedAdjacency { csr: Arc::new(csr) }
}
