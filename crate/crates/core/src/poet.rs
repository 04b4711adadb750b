//! Principal orthogonal complement thresholding: remove the spiked part,
//! threshold the off-diagonal residual, reassemble.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DataMatrix;
use crate::spectral::{eigendecompose, split, split_from_eigen, Eigen, SpectralSplit};

pub const DEFAULT_THRESHOLD_CONSTANT: f64 = 0.5;
pub const DEFAULT_SCAD_A: f64 = 3.7;
pub const DEFAULT_ADAPTIVE_LASSO_ETA: f64 = 1.0;
/// Eigenvalue floor of the repaired residual, as a fraction of `trace / d`.
pub const DEFAULT_REPAIR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ThresholdRule {
    #[default]
    Hard,
    Soft,
    Scad { a: f64 },
    AdaptiveLasso { eta: f64 },
}

impl ThresholdRule {
    pub fn scad() -> Self {
        ThresholdRule::Scad { a: DEFAULT_SCAD_A }
    }

    pub fn adaptive_lasso() -> Self {
        ThresholdRule::AdaptiveLasso {
            eta: DEFAULT_ADAPTIVE_LASSO_ETA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdRule::Scad { a } if !(a > 2.0) => {
                Err(Error::validation(format!("SCAD requires a > 2, got {a}")))
            }
            ThresholdRule::AdaptiveLasso { eta } if !(eta >= 1.0) => Err(Error::validation(
                format!("adaptive lasso requires eta >= 1, got {eta}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Applies a thresholding rule. Every rule returns `0` for `|x| ≤ τ` and
/// moves `x` by at most `τ` otherwise.
pub fn threshold_value(x: f64, tau: f64, rule: ThresholdRule) -> f64 {
    let ax = x.abs();
    if ax <= tau {
        return 0.0;
    }
    match rule {
        ThresholdRule::Hard => x,
        ThresholdRule::Soft => x.signum() * (ax - tau),
        ThresholdRule::Scad { a } => {
            if ax <= 2.0 * tau {
                x.signum() * (ax - tau)
            } else if ax <= a * tau {
                ((a - 1.0) * x - x.signum() * a * tau) / (a - 2.0)
            } else {
                x
            }
        }
        ThresholdRule::AdaptiveLasso { eta } => {
            let shrink = tau.powf(eta + 1.0) / ax.powf(eta);
            x.signum() * (ax - shrink).max(0.0)
        }
    }
}

/// `C · (√(ln d / n) + √(ln n / n))`.
pub fn threshold_level(n: usize, d: usize, c: f64) -> Result<f64> {
    if n < 2 || d < 2 {
        return Err(Error::validation("threshold level needs n >= 2 and d >= 2"));
    }
    if !(c >= 0.0) {
        return Err(Error::validation("threshold constant must be nonnegative"));
    }
    let nf = n as f64;
    Ok(c * (((d as f64).ln() / nf).sqrt() + (nf.ln() / nf).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PdRepair {
    #[default]
    Off,
    /// Clip residual eigenvalues at `floor · trace / d`.
    Clip { floor: f64 },
}

impl PdRepair {
    pub fn on() -> Self {
        PdRepair::Clip {
            floor: DEFAULT_REPAIR_FLOOR,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoetEstimate {
    pub sigma_tau: DMatrix<f64>,
    pub sigma_u_tau: DMatrix<f64>,
    pub split: SpectralSplit,
    pub threshold_level: f64,
    pub rule: ThresholdRule,
}

/// Thresholds the off-diagonal entries of `residual`, keeping the diagonal.
pub fn threshold_residual(residual: &DMatrix<f64>, tau: f64, rule: ThresholdRule) -> DMatrix<f64> {
    let d = residual.nrows();
    DMatrix::from_fn(d, d, |i, j| {
        let v = residual[(i, j)];
        if i == j {
            v
        } else {
            threshold_value(v, tau, rule)
        }
    })
}

/// Eigenvalue clipping so that the smallest eigenvalue is at least
/// `floor · trace / d`.
pub fn repair_pd(s: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    let d = s.nrows();
    if d == 0 {
        return Ok(s.clone());
    }
    let level = floor * (s.trace() / d as f64).abs();
    let eig = eigendecompose(s)?;
    if eig.values.iter().all(|&v| v >= level) {
        return Ok(s.clone());
    }
    let clipped = DVector::from_iterator(d, eig.values.iter().map(|&v| v.max(level)));
    let mut out = &eig.vectors * DMatrix::from_diagonal(&clipped) * eig.vectors.transpose();
    crate::linalg::symmetrize_in_place(&mut out);
    Ok(out)
}

fn assemble(
    split: SpectralSplit,
    tau: f64,
    rule: ThresholdRule,
    repair: PdRepair,
) -> Result<PoetEstimate> {
    let mut sigma_u_tau = threshold_residual(&split.residual, tau, rule);
    if let PdRepair::Clip { floor } = repair {
        sigma_u_tau = repair_pd(&sigma_u_tau, floor)?;
    }
    let sigma_tau = split.low_rank() + &sigma_u_tau;
    Ok(PoetEstimate {
        sigma_tau,
        sigma_u_tau,
        split,
        threshold_level: tau,
        rule,
    })
}

/// POET with PD repair of the residual controlled by `repair`.
pub fn poet_with(
    s: &DMatrix<f64>,
    m: usize,
    tau: f64,
    rule: ThresholdRule,
    repair: PdRepair,
) -> Result<PoetEstimate> {
    if !(tau >= 0.0) {
        return Err(Error::validation("threshold level must be nonnegative"));
    }
    rule.validate()?;
    assemble(split(s, m)?, tau, rule, repair)
}

/// Same as [`poet_with`] reusing an eigendecomposition of `s`.
pub fn poet_from_eigen(
    s: &DMatrix<f64>,
    eig: &Eigen,
    m: usize,
    tau: f64,
    rule: ThresholdRule,
    repair: PdRepair,
) -> Result<PoetEstimate> {
    if !(tau >= 0.0) {
        return Err(Error::validation("threshold level must be nonnegative"));
    }
    rule.validate()?;
    assemble(split_from_eigen(s, eig, m)?, tau, rule, repair)
}

pub fn poet(s: &DMatrix<f64>, m: usize, tau: f64, rule: ThresholdRule) -> Result<PoetEstimate> {
    poet_with(s, m, tau, rule, PdRepair::Off)
}

/// Candidate constants `0.1, 0.2, …, 2.0`.
pub fn default_constant_grid() -> Vec<f64> {
    (1..=20).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone)]
pub struct ConstantSelection {
    pub constant: f64,
    /// Mean held-out squared Frobenius discrepancy per grid point.
    pub scores: Vec<(f64, f64)>,
}

/// Chooses the threshold constant `C` by `folds`-fold cross-validation.
///
/// For each fold the thresholded estimate on the training rows is compared in
/// squared Frobenius norm with the raw `estimator` output on the held-out rows.
pub fn select_threshold_constant<F>(
    x: &DataMatrix,
    m: usize,
    rule: ThresholdRule,
    grid: &[f64],
    folds: usize,
    estimator: F,
) -> Result<ConstantSelection>
where
    F: Fn(&DataMatrix) -> Result<DMatrix<f64>>,
{
    let n = x.nrows();
    if folds < 2 || n < 2 * folds {
        return Err(Error::validation(format!(
            "{folds}-fold cross-validation needs at least {} rows, got {n}",
            2 * folds.max(2)
        )));
    }
    if grid.is_empty() {
        return Err(Error::validation("empty threshold constant grid"));
    }
    let d = x.ncols();
    let mut totals = vec![0.0; grid.len()];
    for k in 0..folds {
        let lo = k * n / folds;
        let hi = (k + 1) * n / folds;
        let test_rows: Vec<usize> = (lo..hi).collect();
        let train_rows: Vec<usize> = (0..n).filter(|i| *i < lo || *i >= hi).collect();
        let train = x.select_rows(&train_rows);
        let test = x.select_rows(&test_rows);
        let train_est = estimator(&train)?;
        let test_est = estimator(&test)?;
        let eig = eigendecompose(&train_est)?;
        let base = threshold_level(train.nrows(), d, 1.0)?;
        for (slot, &c) in totals.iter_mut().zip(grid) {
            let fit = poet_from_eigen(&train_est, &eig, m, c * base, rule, PdRepair::Off)?;
            *slot += (&fit.sigma_tau - &test_est).norm_squared();
        }
    }
    let scores: Vec<(f64, f64)> = grid
        .iter()
        .zip(&totals)
        .map(|(&c, &t)| (c, t / folds as f64))
        .collect();
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 < best.1 {
            best = s;
        }
    }
    Ok(ConstantSelection {
        constant: best.0,
        scores,
    })
}
