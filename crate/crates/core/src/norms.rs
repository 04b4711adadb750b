//! Matrix error metrics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::ensure_square;
use crate::spectral::{eigendecompose, normalize_signs};

/// Entrywise maximum absolute value.
pub fn max_norm(m: &DMatrix<f64>) -> f64 {
    crate::linalg::max_abs(m)
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

/// Largest singular value.
pub fn spectral(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.is_square() && crate::linalg::asymmetry(m) == 0.0 {
        return m
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .fold(0.0_f64, |acc, v| acc.max(v.abs()));
    }
    m.clone()
        .singular_values()
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(*v))
}

/// Maximum absolute column sum.
pub fn l1_op(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Maximum absolute row sum.
pub fn linf_op(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `d^{-1/2} ‖Σ^{-1/2} M Σ^{-1/2}‖_F`, the Frobenius norm relative to `Σ`.
pub fn rel_frobenius(m: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    ensure_square(sigma, "Sigma")?;
    if m.shape() != sigma.shape() {
        return Err(Error::validation("M and Sigma shapes differ"));
    }
    let d = sigma.nrows();
    let eig = eigendecompose(sigma)?;
    if eig.values.iter().any(|&v| v <= 0.0) {
        return Err(Error::numeric("Sigma is not positive definite"));
    }
    let inv_sqrt = DVector::from_iterator(d, eig.values.iter().map(|v| v.sqrt().recip()));
    let w = &eig.vectors * DMatrix::from_diagonal(&inv_sqrt) * eig.vectors.transpose();
    let whitened = &w * m * &w;
    Ok(whitened.norm() / (d as f64).sqrt())
}

/// `max_j |λ̂_j / λ_j - 1|`.
pub fn ratio_error(lambda_hat: &[f64], lambda: &[f64]) -> Result<f64> {
    if lambda_hat.len() != lambda.len() {
        return Err(Error::validation("eigenvalue lists differ in length"));
    }
    if lambda.contains(&0.0) {
        return Err(Error::validation("true eigenvalue is zero"));
    }
    Ok(lambda_hat
        .iter()
        .zip(lambda)
        .map(|(h, l)| (h / l - 1.0).abs())
        .fold(0.0, f64::max))
}

/// `√d ‖Γ̂ - Γ‖_max` after sign-normalizing both inputs.
pub fn eigvec_error(gamma_hat: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<f64> {
    if gamma_hat.shape() != gamma.shape() {
        return Err(Error::validation(format!(
            "eigenvector shapes differ: {:?} vs {:?}",
            gamma_hat.shape(),
            gamma.shape()
        )));
    }
    let mut a = gamma_hat.clone();
    let mut b = gamma.clone();
    normalize_signs(&mut a);
    normalize_signs(&mut b);
    let d = gamma.nrows() as f64;
    Ok(d.sqrt() * max_norm(&(a - b)))
}

/// Which norms to compute for an [`ErrorReport`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormSelection {
    pub max_norm: bool,
    pub frobenius: bool,
    pub spectral: bool,
    pub l1_op: bool,
    pub linf_op: bool,
    pub rel_frobenius: bool,
}

impl NormSelection {
    pub fn all() -> Self {
        Self {
            max_norm: true,
            frobenius: true,
            spectral: true,
            l1_op: true,
            linf_op: true,
            rel_frobenius: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub max_norm: Option<f64>,
    pub frobenius: Option<f64>,
    pub spectral: Option<f64>,
    pub rel_frobenius: Option<f64>,
    pub l1_op: Option<f64>,
    pub linf_op: Option<f64>,
}

impl ErrorReport {
    /// Scores `estimate - truth`; the relative Frobenius norm is taken with respect to `truth`.
    pub fn compute(
        estimate: &DMatrix<f64>,
        truth: &DMatrix<f64>,
        which: NormSelection,
    ) -> Result<Self> {
        if estimate.shape() != truth.shape() {
            return Err(Error::validation("estimate and truth shapes differ"));
        }
        let diff = estimate - truth;
        Ok(Self {
            max_norm: which.max_norm.then(|| max_norm(&diff)),
            frobenius: which.frobenius.then(|| frobenius(&diff)),
            spectral: which.spectral.then(|| spectral(&diff)),
            rel_frobenius: if which.rel_frobenius {
                Some(rel_frobenius(&diff, truth)?)
            } else {
                None
            },
            l1_op: which.l1_op.then(|| l1_op(&diff)),
            linf_op: which.linf_op.then(|| linf_op(&diff)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_computed_norms() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -3.0, 2.0, 0.0]);
        assert_eq!(max_norm(&m), 3.0);
        assert_eq!(l1_op(&m), 3.0);
        assert_eq!(linf_op(&m), 4.0);
    }

    #[test]
    fn zero_and_identity() {
        let z = DMatrix::<f64>::zeros(4, 4);
        assert_eq!(max_norm(&z), 0.0);
        assert_eq!(frobenius(&z), 0.0);
        assert_eq!(spectral(&z), 0.0);
        assert_eq!(l1_op(&z), 0.0);
        assert_eq!(linf_op(&z), 0.0);
        let i = DMatrix::<f64>::identity(5, 5);
        assert_abs_diff_eq!(frobenius(&i), 5f64.sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(spectral(&i), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn nonsymmetric_spectral_uses_singular_values() {
        // Singular values of [[0, 2], [0, 0]] are (2, 0).
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        assert_abs_diff_eq!(spectral(&m), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rel_frobenius_identities() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 2.0, 0.1, 0.0, 0.1, 3.0]);
        let i = DMatrix::identity(3, 3);
        assert_abs_diff_eq!(
            rel_frobenius(&m, &i).unwrap(),
            frobenius(&m) / 3f64.sqrt(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(rel_frobenius(&m, &m).unwrap(), 1.0, epsilon = 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(rel_frobenius(&DMatrix::identity(2, 2), &bad).is_err());
    }

    #[test]
    fn ratio_error_examples() {
        assert_eq!(ratio_error(&[3.0, 2.0], &[3.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ratio_error(&[6.0, 4.0], &[3.0, 2.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(ratio_error(&[3.0, 2.0], &[2.0, 4.0]).unwrap(), 0.5);
        assert!(ratio_error(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn eigvec_error_examples() {
        let g = DMatrix::from_row_slice(4, 1, &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(eigvec_error(&g, &g).unwrap(), 0.0);
        assert_eq!(eigvec_error(&(-&g), &g).unwrap(), 0.0);
        let h = DMatrix::from_row_slice(4, 1, &[0.6, 0.5, 0.5, 0.5]);
        assert_abs_diff_eq!(eigvec_error(&h, &g).unwrap(), 0.2, epsilon = 1e-12);
        assert!(eigvec_error(&g, &DMatrix::zeros(3, 1)).is_err());
    }
}
