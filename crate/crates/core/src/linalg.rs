//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

pub(crate) const SYMMETRY_TOL: f64 = 1e-10;

pub(crate) fn cholesky(m: &Matrix, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite(what))
}

pub(crate) fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// `(A + A^T) / 2`.
pub(crate) fn symmetrize(m: &mut Matrix) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factor of a covariance estimate, adding a ridge of `1e-8 * trace / p`
/// when the plain factorization fails.
pub(crate) fn regularized_cholesky(sigma: &mut Matrix) -> Result<Cholesky<f64, Dyn>> {
    if let Some(ch) = Cholesky::new(sigma.clone()) {
        return Ok(ch);
    }
    let p = sigma.nrows();
    let ridge = 1e-8 * sigma.trace() / p as f64;
    if !(ridge > 0.0) || !ridge.is_finite() {
        return Err(Error::SingularCovariance);
    }
    for i in 0..p {
        sigma[(i, i)] += ridge;
    }
    Cholesky::new(sigma.clone()).ok_or(Error::SingularCovariance)
}

/// Spectral norm of a symmetric matrix.
pub fn spectral_norm_sym(m: &Matrix) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// `(rho^{|i-j|})`, the AR(1) correlation matrix used by the simulation designs.
pub fn ar1_matrix(p: usize, rho: f64) -> Matrix {
    Matrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

pub(crate) fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}
