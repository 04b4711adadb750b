//! Raw (pre-thresholding) scatter estimators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, symmetrize_in_place, DataMatrix};

pub const REG_TYLER_TOL: f64 = 1e-8;
pub const REG_TYLER_MAX_ITER: usize = 200;

/// Rows closer than this (relative to the largest centered row norm) to the
/// center are dropped from sign-based estimators.
const COINCIDE_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScatterKind {
    Sample,
    SpatialSign,
    TylerPlugin,
    RegTyler { alpha: f64 },
}

#[derive(Debug, Clone)]
pub struct ScatterEstimate {
    pub matrix: DMatrix<f64>,
    pub kind: ScatterKind,
    pub center: DVector<f64>,
    /// Rows dropped because they coincided with the center.
    pub excluded_rows: usize,
}

impl ScatterEstimate {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

fn center_rows(x: &DataMatrix, mu: &DVector<f64>) -> Result<DataMatrix> {
    if mu.len() != x.ncols() {
        return Err(Error::validation(format!(
            "center has length {}, data have {} columns",
            mu.len(),
            x.ncols()
        )));
    }
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    Ok(c)
}

/// Rows with squared norm above the coincidence threshold.
fn usable_rows(centered: &DataMatrix) -> (Vec<usize>, usize) {
    let norms: Vec<f64> = centered.row_iter().map(|r| r.norm()).collect();
    let scale = norms.iter().copied().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..norms.len())
        .filter(|&i| norms[i] > COINCIDE_TOL * scale && norms[i] > 0.0)
        .collect();
    let dropped = norms.len() - keep.len();
    (keep, dropped)
}

/// `(d / n) Σ_i w_i x_i x_iᵀ` over the given rows, symmetrized.
fn weighted_outer_sum(centered: &DataMatrix, rows: &[usize], weights: &[f64]) -> DMatrix<f64> {
    let d = centered.ncols();
    let n = rows.len();
    let mut scaled = DMatrix::zeros(n, d);
    let mut plain = DMatrix::zeros(n, d);
    for (k, (&i, &w)) in rows.iter().zip(weights).enumerate() {
        let row = centered.row(i);
        plain.set_row(k, &row);
        scaled.set_row(k, &(row * w));
    }
    let mut s = scaled.tr_mul(&plain) * (d as f64 / n as f64);
    symmetrize_in_place(&mut s);
    s
}

fn rescale_to_trace(s: &mut DMatrix<f64>) -> Result<()> {
    let d = s.nrows() as f64;
    let tr = s.trace();
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(Error::numeric(format!("cannot normalize a matrix with trace {tr}")));
    }
    *s *= d / tr;
    Ok(())
}

/// Mean-centered covariance with divisor `n`, optionally rescaled to trace `d`.
pub fn sample_covariance(x: &DataMatrix, normalize_to_scatter: bool) -> Result<ScatterEstimate> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::validation("sample covariance needs at least two rows"));
    }
    let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
    let centered = center_rows(x, &mean)?;
    let mut s = centered.tr_mul(&centered) / n as f64;
    symmetrize_in_place(&mut s);
    if normalize_to_scatter {
        rescale_to_trace(&mut s)?;
    }
    Ok(ScatterEstimate {
        matrix: s,
        kind: ScatterKind::Sample,
        center: mean,
        excluded_rows: 0,
    })
}

/// `(d/n) Σ_i U(X_i - μ) U(X_i - μ)ᵀ` with `U(x) = x / ‖x‖`.
pub fn spatial_sign_covariance(x: &DataMatrix, mu: &DVector<f64>) -> Result<ScatterEstimate> {
    let centered = center_rows(x, mu)?;
    let (rows, dropped) = usable_rows(&centered);
    if rows.is_empty() {
        return Err(Error::validation("every row coincides with the center"));
    }
    let weights: Vec<f64> = rows
        .iter()
        .map(|&i| {
            let r = centered.row(i);
            r.dot(&r).recip()
        })
        .collect();
    let mut s = weighted_outer_sum(&centered, &rows, &weights);
    rescale_to_trace(&mut s)?;
    Ok(ScatterEstimate {
        matrix: s,
        kind: ScatterKind::SpatialSign,
        center: mu.clone(),
        excluded_rows: dropped,
    })
}

fn plugin_pass(
    centered: &DataMatrix,
    rows: &[usize],
    v: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d = centered.ncols();
    if v.shape() != (d, d) {
        return Err(Error::validation("precision initializer has the wrong shape"));
    }
    let mut weights = Vec::with_capacity(rows.len());
    for &i in rows {
        let r = centered.row(i).transpose();
        let q = r.dot(&(v * &r));
        if !(q > 0.0) {
            return Err(Error::numeric(format!(
                "quadratic form of row {i} under the precision initializer is {q}; \
                 the initializer is not positive definite"
            )));
        }
        weights.push(q.recip());
    }
    let mut s = weighted_outer_sum(centered, rows, &weights);
    rescale_to_trace(&mut s)?;
    Ok(s)
}

/// Refinement applied to each intermediate plug-in estimate before it is
/// inverted for the next pass.
pub type Refinement<'a> = dyn Fn(&DMatrix<f64>) -> Result<DMatrix<f64>> + 'a;

/// Naive Tyler plug-in `(d/n) Σ_i x_i x_iᵀ / (x_iᵀ V x_i)`, rescaled to trace `d`.
///
/// With `iterations > 1` each further pass uses the inverse of the previous
/// estimate after passing it through `refine` (raw re-inversion when `None`).
pub fn tyler_plugin(
    x: &DataMatrix,
    mu: &DVector<f64>,
    v_init: &DMatrix<f64>,
    iterations: usize,
    refine: Option<&Refinement<'_>>,
) -> Result<ScatterEstimate> {
    if iterations == 0 {
        return Err(Error::validation("tyler_plugin needs at least one iteration"));
    }
    let centered = center_rows(x, mu)?;
    let (rows, dropped) = usable_rows(&centered);
    if rows.is_empty() {
        return Err(Error::validation("every row coincides with the center"));
    }
    let mut s = plugin_pass(&centered, &rows, v_init)?;
    for _ in 1..iterations {
        let refined = match refine {
            Some(f) => f(&s)?,
            None => s.clone(),
        };
        let v = crate::linalg::inverse(&refined)?;
        s = plugin_pass(&centered, &rows, &v)?;
    }
    Ok(ScatterEstimate {
        matrix: s,
        kind: ScatterKind::TylerPlugin,
        center: mu.clone(),
        excluded_rows: dropped,
    })
}

/// Consecutive-pair differences `x_{2j} - x_{2j+1}`, `j < ⌊n/2⌋`.
pub fn symmetrize(x: &DataMatrix) -> Result<DataMatrix> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::validation("symmetrization needs at least two rows"));
    }
    let half = n / 2;
    let mut out = DMatrix::zeros(half, d);
    for j in 0..half {
        out.set_row(j, &(x.row(2 * j) - x.row(2 * j + 1)));
    }
    Ok(out)
}

/// `max(0.1, 1.1 (γ - 1 + s_max (1 + √γ)²))`.
pub fn regtyler_alpha(s_max: f64, gamma: f64) -> f64 {
    let inner = gamma - 1.0 + s_max * (1.0 + gamma.sqrt()).powi(2);
    (1.1 * inner).max(0.1)
}

/// Regularization level for [`reg_tyler`] with `γ = d / (2n)`, `n` the sample
/// size before symmetrization and `s_max` the spectral norm of the sample
/// covariance of the symmetrized rows.
pub fn regtyler_alpha_default(x_sym: &DataMatrix, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::validation("need at least two original samples"));
    }
    let s = if x_sym.nrows() >= 2 {
        sample_covariance(x_sym, false)?.matrix
    } else {
        x_sym.tr_mul(x_sym)
    };
    let s_max = crate::norms::spectral(&s);
    let gamma = x_sym.ncols() as f64 / (2.0 * n as f64);
    Ok(regtyler_alpha(s_max, gamma))
}

#[derive(Debug, Clone)]
pub struct RegTylerFit {
    /// Fixed point rescaled to trace `d`.
    pub estimate: ScatterEstimate,
    /// The unnormalized fixed point.
    pub fixed_point: DMatrix<f64>,
    pub iterations: usize,
    /// `‖Σ - map(Σ)‖_max` at each iteration.
    pub change_history: Vec<f64>,
    /// `‖Σ - map(Σ)‖_max` at the returned fixed point.
    pub fixed_point_residual: f64,
}

fn reg_tyler_map(
    x: &DataMatrix,
    rows: &[usize],
    sigma: &DMatrix<f64>,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    let d = x.ncols();
    let v = spd_inverse(sigma)?;
    let weights: Vec<f64> = rows
        .iter()
        .map(|&i| {
            let r = x.row(i).transpose();
            r.dot(&(&v * &r)).recip()
        })
        .collect();
    let data_part = weighted_outer_sum(x, rows, &weights);
    let shrink = alpha / (1.0 + alpha);
    Ok(data_part / (1.0 + alpha) + DMatrix::identity(d, d) * shrink)
}

/// Regularized Tyler fixed point
/// `Σ = (1/(1+α)) (d/n) Σ_i x_i x_iᵀ / (x_iᵀ Σ⁻¹ x_i) + (α/(1+α)) I`,
/// iterated from `I` on already-centered rows.
pub fn reg_tyler(x_sym: &DataMatrix, alpha: f64, tol: f64, max_iter: usize) -> Result<RegTylerFit> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::validation("alpha must be positive"));
    }
    let d = x_sym.ncols();
    let zero = DVector::zeros(d);
    let (rows, _) = usable_rows(&center_rows(x_sym, &zero)?);
    if rows.is_empty() {
        return Err(Error::validation("all symmetrized rows are zero"));
    }
    let mut sigma = DMatrix::identity(d, d);
    let mut history = Vec::new();
    for iter in 1..=max_iter {
        let next = reg_tyler_map(x_sym, &rows, &sigma, alpha)?;
        let residual = crate::linalg::max_abs(&(&next - &sigma));
        let relative = (&next - &sigma).norm() / sigma.norm();
        history.push(residual);
        if relative < tol && residual < tol {
            let mut normalized = sigma.clone();
            rescale_to_trace(&mut normalized)?;
            return Ok(RegTylerFit {
                estimate: ScatterEstimate {
                    matrix: normalized,
                    kind: ScatterKind::RegTyler { alpha },
                    center: zero,
                    excluded_rows: x_sym.nrows() - rows.len(),
                },
                fixed_point: sigma,
                iterations: iter,
                change_history: history,
                fixed_point_residual: residual,
            });
        }
        sigma = next;
    }
    Err(Error::FixedPointNotConverged {
        iterations: max_iter,
        residual: history.last().copied().unwrap_or(f64::NAN),
        last: sigma,
    })
}
