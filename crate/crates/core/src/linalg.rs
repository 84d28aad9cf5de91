//! Dense linear-algebra helpers: sorted symmetric eigensystems and operator norms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest matrix (rows * cols) for which operator norms use a dense SVD.
pub const DENSE_NORM_BUDGET: usize = 1 << 16;

/// Eigenvalues in descending order with matching eigenvector columns.
pub fn symmetric_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(m.nrows(), order.len());
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// `max |lambda|` of a symmetric matrix.
pub fn symmetric_operator_norm(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Largest singular value via power iteration on `A^T A`.
///
/// `apply` computes `A x` and `apply_t` computes `A^T y`.
pub fn power_iteration_norm<F, G>(
    apply: F,
    apply_t: G,
    dim_in: usize,
    tol: f64,
    max_iters: usize,
) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    // deterministic, non-degenerate start
    let mut x = DVector::from_fn(dim_in, |i, _| 1.0 + ((i as f64) * 0.618_033_988_7).fract());
    x /= x.norm();
    let mut estimate = 0.0;
    for _ in 0..max_iters {
        let y = apply_t(&apply(&x));
        let norm = y.norm();
        if !norm.is_finite() {
            return Err(Error::Numerical("power iteration diverged".into()));
        }
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = norm.sqrt();
        x = y / norm;
        if (next - estimate).abs() <= tol * next.max(1e-300) {
            return Ok(next);
        }
        estimate = next;
    }
    Ok(estimate)
}

/// Spectral norm: dense SVD within [`DENSE_NORM_BUDGET`], power iteration above it.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() * m.ncols() <= DENSE_NORM_BUDGET {
        return m.singular_values().max();
    }
    power_iteration_norm(|x| m * x, |y| m.transpose() * y, m.ncols(), 1e-12, 10_000)
        .unwrap_or(f64::NAN)
}
