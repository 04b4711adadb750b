//! Symmetric eigendecomposition, spiked low-rank splits and factor-number
//! selection by eigenvalue ratio (ER) or growth ratio (GR).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, ensure_finite, ensure_square};

/// Default search bound for the factor-number criteria.
pub const DEFAULT_MAX_FACTORS: usize = 8;

const SIGN_ZERO_TOL: f64 = 1e-12;
const GR_FLOOR: f64 = 1e-12;

/// Full eigensystem with eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: DVector<f64>,
    /// Columns are eigenvectors, first nonzero entry positive.
    pub vectors: DMatrix<f64>,
}

/// Leading `m` eigenpairs of a symmetric matrix and the residual after removing them.
#[derive(Debug, Clone)]
pub struct SpectralSplit {
    pub lambda_m: DVector<f64>,
    pub gamma_m: DMatrix<f64>,
    pub residual: DMatrix<f64>,
}

impl SpectralSplit {
    pub fn rank(&self) -> usize {
        self.lambda_m.len()
    }

    /// `Γ_m Λ_m Γ_mᵀ`.
    pub fn low_rank(&self) -> DMatrix<f64> {
        let d = self.gamma_m.nrows();
        if self.rank() == 0 {
            return DMatrix::zeros(d, d);
        }
        let scaled = &self.gamma_m * DMatrix::from_diagonal(&self.lambda_m);
        scaled * self.gamma_m.transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FactorCriterion {
    /// Eigenvalue ratio.
    Er,
    /// Growth ratio.
    Gr,
}

#[derive(Debug, Clone)]
pub struct FactorCountResult {
    pub m_hat: usize,
    /// `criterion_values[j - 1]` is the criterion at `j = 1..=M`.
    pub criterion_values: Vec<f64>,
    pub method: FactorCriterion,
    pub max_factors: usize,
}

/// Flips the sign of every column so that its first entry with magnitude above
/// `1e-12` is positive.
pub fn normalize_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        if let Some(first) = col.iter().find(|v| v.abs() > SIGN_ZERO_TOL).copied() {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
pub fn eigendecompose(s: &DMatrix<f64>) -> Result<Eigen> {
    ensure_square(s, "matrix")?;
    ensure_finite(s, "matrix")?;
    if asymmetry(s) > 1e-10 {
        return Err(Error::validation("matrix is not symmetric"));
    }
    let d = s.nrows();
    if d == 0 {
        return Ok(Eigen {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let eig = SymmetricEigen::new(s.clone());
    let mut order: Vec<usize> = (0..d).collect();
    // Stable sort keeps the solver's order among exact ties.
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(d, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    normalize_signs(&mut vectors);
    Ok(Eigen { values, vectors })
}

/// Eigenvalues only, descending.
pub fn eigenvalues(s: &DMatrix<f64>) -> Result<DVector<f64>> {
    ensure_square(s, "matrix")?;
    ensure_finite(s, "matrix")?;
    if asymmetry(s) > 1e-10 {
        return Err(Error::validation("matrix is not symmetric"));
    }
    let mut vals: Vec<f64> = s.clone().symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok(DVector::from_vec(vals))
}

/// Splits `s` into its rank-`m` spiked part and the residual.
pub fn split(s: &DMatrix<f64>, m: usize) -> Result<SpectralSplit> {
    ensure_square(s, "matrix")?;
    let d = s.nrows();
    if m > d {
        return Err(Error::validation(format!(
            "cannot split {m} factors from a {d}x{d} matrix"
        )));
    }
    if m == 0 {
        if asymmetry(s) > 1e-10 {
            return Err(Error::validation("matrix is not symmetric"));
        }
        return Ok(SpectralSplit {
            lambda_m: DVector::zeros(0),
            gamma_m: DMatrix::zeros(d, 0),
            residual: s.clone(),
        });
    }
    let eig = eigendecompose(s)?;
    split_from_eigen(s, &eig, m)
}

/// Like [`split`] but reuses an existing eigendecomposition of `s`.
pub fn split_from_eigen(s: &DMatrix<f64>, eig: &Eigen, m: usize) -> Result<SpectralSplit> {
    let d = s.nrows();
    if m > d {
        return Err(Error::validation(format!(
            "cannot split {m} factors from a {d}x{d} matrix"
        )));
    }
    let lambda_m = eig.values.rows(0, m).into_owned();
    let gamma_m = eig.vectors.columns(0, m).into_owned();
    let mut out = SpectralSplit {
        lambda_m,
        gamma_m,
        residual: DMatrix::zeros(0, 0),
    };
    let mut residual = s - out.low_rank();
    crate::linalg::symmetrize_in_place(&mut residual);
    out.residual = residual;
    Ok(out)
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = j;
        }
    }
    best
}

/// Selects the number of spiked eigenvalues.
///
/// `eigs` must be sorted in descending order. ER maximizes `λ_j / λ_{j+1}` over
/// `1 ≤ j ≤ M`. GR maximizes `ln(1 + λ_j / V_{j-1}) / ln(1 + λ_{j+1} / V_j)`
/// where `V_j = Σ_{l=j+1}^{min(n,d)-1} λ_l`; eigenvalues below `1e-12 λ_1` are
/// raised to that floor first. Ties resolve to the smallest `j`.
pub fn estimate_num_factors(
    eigs: &[f64],
    max_factors: usize,
    method: FactorCriterion,
    n: usize,
    d: usize,
) -> Result<FactorCountResult> {
    if max_factors == 0 {
        return Err(Error::validation("factor search bound M must be at least 1"));
    }
    if eigs.len() < max_factors + 1 {
        return Err(Error::validation(format!(
            "need at least M+1 = {} eigenvalues, got {}",
            max_factors + 1,
            eigs.len()
        )));
    }
    if eigs.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::validation("eigenvalues must be sorted descending"));
    }
    let criterion_values = match method {
        FactorCriterion::Er => (1..=max_factors)
            .map(|j| eigs[j - 1] / eigs[j])
            .collect::<Vec<_>>(),
        FactorCriterion::Gr => {
            let tail_end = n.min(d).saturating_sub(1);
            if tail_end < max_factors || eigs.len() < tail_end {
                return Err(Error::validation(format!(
                    "growth ratio needs min(n,d)-1 = {tail_end} eigenvalues with M = {max_factors} < min(n,d)"
                )));
            }
            if eigs[0] <= 0.0 {
                return Err(Error::validation("leading eigenvalue must be positive"));
            }
            let floor = GR_FLOOR * eigs[0];
            let lam: Vec<f64> = eigs.iter().map(|&v| v.max(floor)).collect();
            // v_sum[j] = Σ_{l=j+1}^{tail_end} λ_l (1-based l), v_sum[0] the full tail sum.
            let mut v_sum = vec![0.0; max_factors + 1];
            for (j, slot) in v_sum.iter_mut().enumerate() {
                *slot = lam[j..tail_end].iter().sum();
            }
            (1..=max_factors)
                .map(|j| {
                    let num = (lam[j - 1] / v_sum[j - 1]).ln_1p();
                    let den = if v_sum[j] > 0.0 {
                        (lam[j] / v_sum[j]).ln_1p()
                    } else {
                        f64::INFINITY
                    };
                    num / den
                })
                .collect()
        }
    };
    if criterion_values.iter().any(|v| v.is_nan()) {
        return Err(Error::numeric("factor criterion produced NaN"));
    }
    let m_hat = argmax_first(&criterion_values) + 1;
    Ok(FactorCountResult {
        m_hat,
        criterion_values,
        method,
        max_factors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        crate::linalg::max_abs(m)
    }

    #[test]
    fn diagonal_eigendecomposition_is_sorted_permutation() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let eig = eigendecompose(&s).unwrap();
        assert_eq!(eig.values.as_slice(), &[3.0, 2.0, 1.0]);
        let expected = DMatrix::from_row_slice(3, 3, &[1., 0., 0., 0., 0., 1., 0., 1., 0.]);
        assert_abs_diff_eq!(eig.vectors, expected, epsilon = 1e-12);
    }

    #[test]
    fn reconstruction_and_orthonormality() {
        let a = DMatrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let s = &a * a.transpose();
        let eig = eigendecompose(&s).unwrap();
        let rec = &eig.vectors * DMatrix::from_diagonal(&eig.values) * eig.vectors.transpose();
        assert!(max_abs(&(rec - &s)) < 1e-8 * max_abs(&s));
        let gram = eig.vectors.transpose() * &eig.vectors;
        assert!(max_abs(&(gram - DMatrix::identity(6, 6))) < 1e-10);
        for col in eig.vectors.column_iter() {
            let first = col.iter().find(|v| v.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn repeated_eigenvalue_still_orthonormal() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0]));
        let eig = eigendecompose(&s).unwrap();
        let gram = eig.vectors.transpose() * &eig.vectors;
        assert!(max_abs(&(gram - DMatrix::identity(2, 2))) < 1e-12);
        let rec = &eig.vectors * DMatrix::from_diagonal(&eig.values) * eig.vectors.transpose();
        assert!(max_abs(&(rec - s)) < 1e-12);
    }

    #[test]
    fn asymmetric_input_rejected() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(eigendecompose(&s), Err(Error::Validation(_))));
    }

    #[test]
    fn split_edge_cases() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 1.0, 1.0]));
        let zero = split(&s, 0).unwrap();
        assert_eq!(zero.residual, s);
        let full = split(&s, 3).unwrap();
        assert!(max_abs(&full.residual) < 1e-8);
        let one = split(&s, 1).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0, 1.0]));
        assert_abs_diff_eq!(one.residual, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(one.lambda_m[0], 10.0, epsilon = 1e-12);
        assert!(matches!(split(&s, 4), Err(Error::Validation(_))));
    }

    const EXAMPLE: [f64; 9] = [50.0, 40.0, 30.0, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05];

    #[test]
    fn er_peaks_at_spike_boundary() {
        let r = estimate_num_factors(&EXAMPLE, 8, FactorCriterion::Er, 9, 9).unwrap();
        assert_eq!(r.m_hat, 3);
        assert_abs_diff_eq!(r.criterion_values[2], 60.0, epsilon = 1e-12);
    }

    #[test]
    fn er_tie_breaks_to_smallest_index() {
        let eigs: Vec<f64> = (0..6).map(|k| 0.5_f64.powi(k)).collect();
        let r = estimate_num_factors(&eigs, 4, FactorCriterion::Er, 100, 100).unwrap();
        assert!(r.criterion_values.iter().all(|v| (v - 2.0).abs() < 1e-12));
        assert_eq!(r.m_hat, 1);
    }

    #[test]
    fn gr_on_worked_example() {
        let r = estimate_num_factors(&EXAMPLE, 8, FactorCriterion::Gr, 9, 9).unwrap();
        assert_eq!(r.m_hat, 3);
        // Independent recomputation of the j = 3 term with explicit sums.
        let v2: f64 = EXAMPLE[2..8].iter().sum();
        let v3: f64 = EXAMPLE[3..8].iter().sum();
        let expected = (1.0 + 30.0 / v2).ln() / (1.0 + 0.5 / v3).ln();
        assert_abs_diff_eq!(r.criterion_values[2], expected, epsilon = 1e-12);
    }

    #[test]
    fn factor_count_input_validation() {
        assert!(estimate_num_factors(&EXAMPLE[..5], 8, FactorCriterion::Er, 9, 9).is_err());
        assert!(estimate_num_factors(&EXAMPLE, 8, FactorCriterion::Gr, 5, 9).is_err());
        assert!(estimate_num_factors(&EXAMPLE, 0, FactorCriterion::Er, 9, 9).is_err());
    }
}
