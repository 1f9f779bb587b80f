//! CSR sparse matrices for graph adjacency.

use super::dense::DenseMatrix;
use super::KernelError;

/// Square sparse matrix in compressed sparse row form. Column indices are
/// strictly increasing within each row, so the layout of a given matrix is
/// unique and comparable.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseAdjacency {
    /// Build from `(row, col, value)` entries. Entries may arrive in any
    /// order; duplicates are rejected.
    pub fn from_entries(n: usize, entries: &[(usize, usize, f64)]) -> Result<Self, KernelError> {
        let mut sorted: Vec<(usize, usize, f64)> = entries.to_vec();
        for &(r, c, v) in &sorted {
            if r >= n || c >= n {
                return Err(KernelError::ShapeMismatch {
                    op: "sparse_from_entries",
                    detail: format!("entry ({r},{c}) out of range for n={n}"),
                });
            }
            if !v.is_finite() {
                return Err(KernelError::NotFinite { op: "sparse_from_entries" });
            }
        }
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        if sorted.windows(2).any(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(KernelError::ShapeMismatch {
                op: "sparse_from_entries",
                detail: "duplicate entry".into(),
            });
        }
        let mut row_ptr = vec![0usize; n + 1];
        for &(r, _, _) in &sorted {
            row_ptr[r + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(SparseAdjacency {
            n,
            row_ptr,
            col_idx: sorted.iter().map(|e| e.1).collect(),
            values: sorted.iter().map(|e| e.2).collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        SparseAdjacency {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn has_entry(&self, i: usize, j: usize) -> bool {
        self.row(i).0.binary_search(&j).is_ok()
    }

    /// Sparse-dense product `self * m`.
    pub fn matmul_dense(&self, m: &DenseMatrix) -> Result<DenseMatrix, KernelError> {
        if m.rows() != self.n {
            return Err(KernelError::ShapeMismatch {
                op: "spmm",
                detail: format!("adjacency n={} vs dense rows={}", self.n, m.rows()),
            });
        }
        let cols = m.cols();
        let mut out = DenseMatrix::zeros(self.n, cols);
        for i in 0..self.n {
            let (idx, vals) = self.row(i);
            let dst = out.row_mut(i);
            for (&j, &v) in idx.iter().zip(vals) {
                for (d, s) in dst.iter_mut().zip(m.row(j)) {
                    *d += v * s;
                }
            }
        }
        Ok(out)
    }

    /// Transposed product `self^T * m`, used by the backward pass.
    pub fn matmul_dense_transposed(&self, m: &DenseMatrix) -> Result<DenseMatrix, KernelError> {
        if m.rows() != self.n {
            return Err(KernelError::ShapeMismatch {
                op: "spmm_transposed",
                detail: format!("adjacency n={} vs dense rows={}", self.n, m.rows()),
            });
        }
        let cols = m.cols();
        let mut out = DenseMatrix::zeros(self.n, cols);
        for i in 0..self.n {
            let (idx, vals) = self.row(i);
            let src = m.row(i);
            for (&j, &v) in idx.iter().zip(vals) {
                let dst = out.row_mut(j);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (idx, vals) = self.row(i);
            for (&j, &v) in idx.iter().zip(vals) {
                out.set(i, j, v);
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        for i in 0..self.n {
            let (idx, vals) = self.row(i);
            for (&j, &v) in idx.iter().zip(vals) {
                let (jdx, jvals) = self.row(j);
                match jdx.binary_search(&i) {
                    Ok(pos) if jvals[pos] == v => {}
                    _ => return false,
                }
            }
        }
        true
    }

    /// Largest-magnitude eigenvalue estimate by power iteration; valid for
    /// symmetric matrices.
    pub fn spectral_radius_estimate(&self, iters: usize) -> f64 {
        if self.n == 0 || self.nnz() == 0 {
            return 0.0;
        }
        let mut v = DenseMatrix::filled(self.n, 1, |i, _| 1.0 + (i % 7) as f64 * 0.1);
        let mut lambda = 0.0;
        for _ in 0..iters {
            let w = self.matmul_dense(&v).expect("square by construction");
            let norm = w.frob_norm();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm / v.frob_norm();
            v = w.scale(1.0 / norm);
        }
        lambda
    }
}
