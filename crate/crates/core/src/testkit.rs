//! Numerical checking helpers shared by test harnesses.

use crate::kernel::DenseMatrix;

/// Central finite differences of a scalar function with respect to one
/// parameter matrix.
pub fn finite_diff(
    param: &DenseMatrix,
    perturbation: f64,
    eval: &dyn Fn(&DenseMatrix) -> f64,
) -> DenseMatrix {
    let mut grad = DenseMatrix::zeros(param.rows(), param.cols());
    for i in 0..param.len() {
        let mut plus = param.clone();
        plus.data_mut()[i] += perturbation;
        let mut minus = param.clone();
        minus.data_mut()[i] -= perturbation;
        grad.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * perturbation);
    }
    grad
}

/// Relative Frobenius error of `got` against `want`.
pub fn rel_err(got: &DenseMatrix, want: &DenseMatrix) -> f64 {
    let denom = want.frob_norm().max(1e-6);
    got.sub(want).expect("shapes match").frob_norm() / denom
}
