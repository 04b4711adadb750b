//! Small dense linear-algebra helpers shared across the estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Rows are observations, columns are coordinates.
pub type DataMatrix = DMatrix<f64>;

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// `max |S - Sᵀ|` relative to `max(1, max |S|)`.
pub fn asymmetry(s: &DMatrix<f64>) -> f64 {
    let n = s.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((s[(i, j)] - s[(j, i)]).abs());
        }
    }
    worst / max_abs(s).max(1.0)
}

pub fn ensure_square(s: &DMatrix<f64>, what: &str) -> Result<()> {
    if s.nrows() != s.ncols() {
        return Err(Error::validation(format!(
            "{what} must be square, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    Ok(())
}

pub fn ensure_finite(s: &DMatrix<f64>, what: &str) -> Result<()> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Replaces `s` by `(s + sᵀ) / 2` in place.
pub fn symmetrize_in_place(s: &mut DMatrix<f64>) {
    let n = s.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
}

/// Inverse of a symmetric positive-definite matrix via Cholesky, symmetrized.
pub fn spd_inverse(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numeric("matrix is not positive definite"))?;
    let mut inv = chol.inverse();
    symmetrize_in_place(&mut inv);
    Ok(inv)
}

/// Inverse of a general square matrix via LU, symmetrized when the input is symmetric.
pub fn inverse(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Ok(inv) = spd_inverse(s) {
        return Ok(inv);
    }
    let mut inv = s
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::numeric("matrix is singular"))?;
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("matrix is singular"));
    }
    if asymmetry(s) < 1e-12 {
        symmetrize_in_place(&mut inv);
    }
    Ok(inv)
}

/// `(ρ^{|i-j|})`, the AR(1) correlation matrix.
pub fn ar1_matrix(d: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| rho.powi(i.abs_diff(j) as i32))
}

/// Quadratic form `xᵀ A x`.
pub fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(a * x))
}
