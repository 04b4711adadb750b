//! Shared inputs for the estimator benchmarks.

use nalgebra::{DMatrix, DVector};
use robust_poet::elliptical::stream_rng;
use robust_poet::location::spatial_median_default;
use robust_poet::scatter::spatial_sign_covariance;
use robust_poet::spectral::split;
use robust_poet::{FactorModel, Scenario, ScenarioSpec};

pub struct Fixture {
    pub x: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub scatter: DMatrix<f64>,
    /// Residual of the spatial-sign scatter after removing three factors.
    pub residual: DMatrix<f64>,
}

/// One heavy-tailed draw from the standard three-factor design.
pub fn fixture(n: usize, d: usize) -> Fixture {
    let spec = ScenarioSpec::standard(Scenario::II, n, d, 1);
    let model = FactorModel::new(&spec.factor_model_spec().unwrap()).unwrap();
    let x = model.sample_with(&spec.tail, n, &mut stream_rng(2, 0)).unwrap();
    let mu = spatial_median_default(&x).unwrap().mu_hat;
    let scatter = spatial_sign_covariance(&x, &mu).unwrap().matrix;
    let residual = split(&scatter, 3).unwrap().residual * d as f64;
    Fixture { x, mu, scatter, residual }
}
