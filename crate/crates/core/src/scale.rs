//! Huber-type estimate of the overall scale linking a trace-normalized
//! scatter matrix to the covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::ensure_finite;

pub const DEFAULT_EPSILON: f64 = 1.0;
pub const DEFAULT_H_CONSTANT: f64 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HuberScale {
    pub theta_hat: f64,
    pub h: f64,
    pub radii: Vec<f64>,
}

/// `d⁻¹ (x_i - μ)ᵀ V (x_i - μ)` for every row.
pub fn mahalanobis_radii(x: &DMatrix<f64>, mu: &DVector<f64>, v_s: &DMatrix<f64>) -> Result<Vec<f64>> {
    let d = x.ncols();
    if mu.len() != d || v_s.shape() != (d, d) {
        return Err(Error::validation("location or precision does not match the data dimension"));
    }
    if d == 0 {
        return Err(Error::validation("dimension must be positive"));
    }
    Ok((0..x.nrows())
        .map(|i| {
            let c = x.row(i).transpose() - mu;
            (v_s * &c).dot(&c) / d as f64
        })
        .collect())
}

/// `h = c · n^{2/(2+ε)}`.
pub fn default_h(n: usize, eps: f64, c: f64) -> Result<f64> {
    if n == 0 || !(eps > 0.0) || !(c > 0.0) {
        return Err(Error::validation("default_h needs n ≥ 1, eps > 0 and c > 0"));
    }
    Ok(c * (n as f64).powf(2.0 / (2.0 + eps)))
}

fn huber_psi(x: f64, h: f64) -> f64 {
    x.clamp(-h, h)
}

/// `Σ_i ψ_h(r_i - θ)`.
pub fn huber_score(radii: &[f64], theta: f64, h: f64) -> f64 {
    radii.iter().map(|&r| huber_psi(r - theta, h)).sum()
}

/// Root of the nonincreasing piecewise-linear score `Σ_i ψ_h(r_i - θ) = 0`,
/// located exactly between consecutive breakpoints `r_i ± h`. If the score
/// vanishes on an interval the midpoint is returned.
pub fn huber_scale(radii: &[f64], h: f64) -> Result<HuberScale> {
    if radii.is_empty() {
        return Err(Error::validation("no radii"));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::validation("h must be positive and finite"));
    }
    if radii.iter().any(|r| !r.is_finite()) {
        return Err(Error::validation("radii must be finite"));
    }
    let mut breaks: Vec<f64> = radii.iter().flat_map(|&r| [r - h, r + h]).collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let zero_tol = 1e-12 * h * radii.len() as f64;
    let score = |t: f64| huber_score(radii, t, h);

    // First breakpoint with a nonpositive score; the last one always qualifies.
    let k = breaks.partition_point(|&b| score(b) > zero_tol);
    let theta = if score(breaks[k]).abs() <= zero_tol {
        let mut end = k;
        while end + 1 < breaks.len() && score(breaks[end + 1]).abs() <= zero_tol {
            end += 1;
        }
        0.5 * (breaks[k] + breaks[end])
    } else {
        let (a, b) = (breaks[k - 1], breaks[k]);
        let (fa, fb) = (score(a), score(b));
        a + (b - a) * fa / (fa - fb)
    };
    Ok(HuberScale {
        theta_hat: theta,
        h,
        radii: radii.to_vec(),
    })
}

/// Scale from radii with the default `h`.
pub fn huber_scale_default(radii: &[f64]) -> Result<HuberScale> {
    huber_scale(radii, default_h(radii.len(), DEFAULT_EPSILON, DEFAULT_H_CONSTANT)?)
}

/// `θ̂ · S`.
pub fn covariance_from_scatter(scatter: &DMatrix<f64>, scale: &HuberScale) -> Result<DMatrix<f64>> {
    ensure_finite(scatter, "scatter")?;
    Ok(scatter * scale.theta_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn small_example() {
        let s = huber_scale(&[1.0, 2.0, 9.0], 3.0).unwrap();
        assert_abs_diff_eq!(s.theta_hat, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(huber_score(&s.radii, s.theta_hat, 3.0), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_radii() {
        let s = huber_scale(&[4.0; 7], 0.5).unwrap();
        assert_abs_diff_eq!(s.theta_hat, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn large_h_is_mean() {
        let r = [0.3, 1.7, 2.2, 5.0, 0.9];
        let s = huber_scale(&r, 1e6).unwrap();
        assert_abs_diff_eq!(s.theta_hat, r.iter().sum::<f64>() / 5.0, epsilon = 1e-9);
    }

    #[test]
    fn flat_root_uses_midpoint() {
        // Score is zero for θ in [1.5, 2.5] when h = 0.5.
        let s = huber_scale(&[1.0, 3.0], 0.5).unwrap();
        assert_abs_diff_eq!(s.theta_hat, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn default_h_values() {
        assert_abs_diff_eq!(default_h(256, 2.0, 1.0).unwrap(), 16.0, epsilon = 1e-12);
        assert!(default_h(0, 1.0, 1.0).is_err());
        assert!(default_h(10, 0.0, 1.0).is_err());
    }

    #[test]
    fn radii_example() {
        let x = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let r = mahalanobis_radii(&x, &DVector::zeros(2), &DMatrix::identity(2, 2)).unwrap();
        assert_abs_diff_eq!(r[0], 12.5, epsilon = 1e-12);
    }

    #[test]
    fn translation_equivariant() {
        let r = [0.4, 1.1, 2.5, 3.3, 7.0, 0.2];
        let base = huber_scale(&r, 1.3).unwrap().theta_hat;
        let shifted: Vec<f64> = r.iter().map(|v| v + 5.0).collect();
        assert_abs_diff_eq!(huber_scale(&shifted, 1.3).unwrap().theta_hat, base + 5.0, epsilon = 1e-10);
    }

    #[test]
    fn bounded_influence() {
        let mut r = vec![1.0, 1.2, 0.8, 1.1, 0.9, 1.0, 1.3, 0.7];
        let base = huber_scale(&r, 0.5).unwrap().theta_hat;
        r.push(1e12);
        let moved = huber_scale(&r, 0.5).unwrap().theta_hat;
        assert!((moved - base).abs() <= 0.5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(huber_scale(&[], 1.0).is_err());
        assert!(huber_scale(&[1.0], 0.0).is_err());
        assert!(huber_scale(&[f64::NAN], 1.0).is_err());
    }
}
