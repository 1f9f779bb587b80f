//! Row orthonormalization and orthogonal matrix sampling.
//!
//! Low-rank intervention bases are constrained to have orthonormal rows; the
//! retraction after each optimizer step is a Gram-Schmidt pass (run twice for
//! numerical hygiene), which preserves the row space and leaves an
//! already-orthonormal matrix essentially untouched.

use super::dense::DenseMatrix;
use super::rng::RngStream;
use super::KernelError;

/// Frobenius norm of `R R^T - I`, the orthonormality residual.
pub fn gram_residual(r: &DenseMatrix) -> f64 {
    let gram = r.matmul(&r.transpose()).expect("R R^T is always defined");
    gram.sub(&DenseMatrix::identity(r.rows())).unwrap().frob_norm()
}

/// Project an `r x d` matrix with full row rank back onto the set of
/// row-orthonormal matrices, preserving its row space.
pub fn qr_reorthogonalize(r: &DenseMatrix) -> Result<DenseMatrix, KernelError> {
    if r.rows() > r.cols() {
        return Err(KernelError::ShapeMismatch {
            op: "qr_reorthogonalize",
            detail: format!("{} rows exceed {} columns", r.rows(), r.cols()),
        });
    }
    let scale = r.max_abs().max(1.0);
    let mut out = r.clone();
    for i in 0..out.rows() {
        // Two orthogonalization passes against the finished rows.
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = out
                    .row(i)
                    .iter()
                    .zip(out.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                let (head, tail) = out.data_mut().split_at_mut(i * r.cols());
                let qj = &head[j * r.cols()..(j + 1) * r.cols()];
                for (v, q) in tail[..r.cols()].iter_mut().zip(qj) {
                    *v -= dot * q;
                }
            }
        }
        let norm: f64 = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-10 * scale {
            return Err(KernelError::DegenerateBasis { row: i });
        }
        for v in out.row_mut(i) {
            *v /= norm;
        }
    }
    Ok(out)
}

/// Haar-distributed orthogonal `d x d` matrix: orthonormalized Gaussian rows.
pub fn haar_orthogonal(d: usize, stream: &mut RngStream) -> DenseMatrix {
    loop {
        let g = DenseMatrix::filled(d, d, |_, _| stream.normal());
        if let Ok(q) = qr_reorthogonalize(&g) {
            return q;
        }
        // A Gaussian matrix is singular with probability zero; resample.
    }
}

/// Row-orthonormal `r x d` matrix with Haar-distributed row space.
pub fn random_orthonormal_rows(
    rank: usize,
    dim: usize,
    stream: &mut RngStream,
) -> Result<DenseMatrix, KernelError> {
    if rank > dim {
        return Err(KernelError::ShapeMismatch {
            op: "random_orthonormal_rows",
            detail: format!("rank {rank} exceeds dim {dim}"),
        });
    }
    loop {
        let g = DenseMatrix::filled(rank, dim, |_, _| stream.normal());
        if let Ok(q) = qr_reorthogonalize(&g) {
            return Ok(q);
        }
    }
}
