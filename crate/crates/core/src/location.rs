//! Spatial median via the modified Weiszfeld iteration.
//!
//! When an iterate lands on a data point the plain Weiszfeld update is
//! undefined; the Vardi–Zhang correction handles that case and keeps the
//! objective non-increasing.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::DataMatrix;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 500;

const COINCIDE_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LocationEstimate {
    pub mu_hat: DVector<f64>,
    pub iterations: usize,
    /// Relative step norm of the last update.
    pub final_step_norm: f64,
}

/// `Σ_i ‖X_i - μ‖₂`.
pub fn spatial_median_objective(x: &DataMatrix, mu: &DVector<f64>) -> f64 {
    x.row_iter()
        .map(|row| {
            row.iter()
                .zip(mu.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

fn coordinatewise_median(x: &DataMatrix) -> DVector<f64> {
    DVector::from_iterator(
        x.ncols(),
        x.column_iter().map(|col| {
            let mut v: Vec<f64> = col.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        }),
    )
}

/// Outcome of one modified Weiszfeld update.
pub(crate) enum Step {
    Move(DVector<f64>),
    /// The current point satisfies the subgradient optimality condition.
    Optimal,
}

pub(crate) fn weiszfeld_step(x: &DataMatrix, mu: &DVector<f64>, scale: f64) -> Step {
    let d = x.ncols();
    let mut weighted = DVector::zeros(d);
    let mut weight_sum = 0.0;
    // Σ_{i: X_i ≠ μ} (X_i - μ)/‖X_i - μ‖, the gradient over non-coincident rows.
    let mut pull = DVector::zeros(d);
    let mut coincident = 0usize;
    for row in x.row_iter() {
        let diff = row.transpose() - mu;
        let dist = diff.norm();
        if dist <= COINCIDE_TOL * scale {
            coincident += 1;
            continue;
        }
        let w = dist.recip();
        weighted.axpy(w, &row.transpose(), 1.0);
        weight_sum += w;
        pull.axpy(w, &diff, 1.0);
    }
    if weight_sum == 0.0 {
        return Step::Optimal;
    }
    let target = weighted / weight_sum;
    if coincident == 0 {
        return Step::Move(target);
    }
    let r = pull.norm();
    let eta = coincident as f64;
    if r <= eta {
        return Step::Optimal;
    }
    let keep = eta / r;
    Step::Move(target * (1.0 - keep) + mu * keep)
}

/// Minimizer of the sum of Euclidean distances to the rows of `x`.
///
/// For `n = 2` every point of the segment is a minimizer; the iteration
/// returns whatever it converges to, which from the coordinatewise-median
/// start is the midpoint.
pub fn spatial_median(x: &DataMatrix, tol: f64, max_iter: usize) -> Result<LocationEstimate> {
    let (n, d) = x.shape();
    if n == 0 || d == 0 {
        return Err(Error::validation("spatial median needs a non-empty data matrix"));
    }
    if !(tol > 0.0) {
        return Err(Error::validation("tolerance must be positive"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("data contain non-finite values"));
    }
    let mut mu = coordinatewise_median(x);
    if n == 1 {
        return Ok(LocationEstimate {
            mu_hat: mu,
            iterations: 0,
            final_step_norm: 0.0,
        });
    }
    let scale = x.row_iter().map(|r| r.norm()).fold(1.0_f64, f64::max);
    let mut step_norm = f64::INFINITY;
    for iter in 1..=max_iter {
        match weiszfeld_step(x, &mu, scale) {
            Step::Optimal => {
                return Ok(LocationEstimate {
                    mu_hat: mu,
                    iterations: iter,
                    final_step_norm: 0.0,
                })
            }
            Step::Move(next) => {
                step_norm = (&next - &mu).norm() / mu.norm().max(1.0);
                mu = next;
                if step_norm <= tol {
                    return Ok(LocationEstimate {
                        mu_hat: mu,
                        iterations: iter,
                        final_step_norm: step_norm,
                    });
                }
            }
        }
    }
    Err(Error::LocationNotConverged {
        iterations: max_iter,
        last_step: step_norm,
        best: mu,
    })
}

/// [`spatial_median`] with the default tolerance and iteration cap.
pub fn spatial_median_default(x: &DataMatrix) -> Result<LocationEstimate> {
    spatial_median(x, DEFAULT_TOL, DEFAULT_MAX_ITER)
}
