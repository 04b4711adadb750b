//! Synthetic data from elliptical factor models `y = B f + u` and the ground
//! truth matrices used to score estimators.
//!
//! `(f, u)` is drawn jointly with covariance `Σ_fu = c · diag(I_m, Σ_u)` where
//! `c = d / tr(BBᵀ + Σ_u)`, so the population scatter `Σ₀ = c (BBᵀ + Σ_u)` has
//! trace `d`. For the Student-t family the radial variable is shared between
//! `f` and `u`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ar1_matrix, asymmetry, spd_inverse, DataMatrix};
use crate::spectral::{eigendecompose, split_from_eigen};

const LOADING_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1;

/// A seeded ChaCha8 generator positioned on an independent stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorModelSpec {
    pub d: usize,
    pub m: usize,
    /// Variance of the entries in each loading column.
    pub loading_variances: Vec<f64>,
    pub idiosyncratic_cov: DMatrix<f64>,
    pub seed: u64,
}

impl FactorModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m > self.d {
            return Err(Error::validation(format!(
                "m = {} exceeds d = {}",
                self.m, self.d
            )));
        }
        if self.loading_variances.len() != self.m {
            return Err(Error::validation(format!(
                "expected {} loading variances, got {}",
                self.m,
                self.loading_variances.len()
            )));
        }
        if self
            .loading_variances
            .iter()
            .any(|&s| !(s > 0.0 && s.is_finite()))
        {
            return Err(Error::validation("loading variances must be positive"));
        }
        if self.idiosyncratic_cov.shape() != (self.d, self.d) {
            return Err(Error::validation("idiosyncratic covariance must be d x d"));
        }
        if asymmetry(&self.idiosyncratic_cov) > 1e-12 {
            return Err(Error::validation("idiosyncratic covariance is not symmetric"));
        }
        if self.idiosyncratic_cov.clone().cholesky().is_none() {
            return Err(Error::validation(
                "idiosyncratic covariance is not positive definite",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TailFamily {
    Gaussian,
    StudentT { nu: f64 },
    MixtureNormal { weight: f64, inflation: f64 },
}

impl TailFamily {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TailFamily::Gaussian => Ok(()),
            TailFamily::StudentT { nu } if nu > 2.0 && nu.is_finite() => Ok(()),
            TailFamily::StudentT { nu } => Err(Error::validation(format!(
                "Student-t degrees of freedom must exceed 2, got {nu}"
            ))),
            TailFamily::MixtureNormal { weight, inflation }
                if weight > 0.0 && weight < 1.0 && inflation > 0.0 && inflation.is_finite() =>
            {
                Ok(())
            }
            TailFamily::MixtureNormal { .. } => Err(Error::validation(
                "mixture weight must lie in (0,1) and inflation must be positive",
            )),
        }
    }

    /// Ratio of the draw covariance to `Σ_fu`.
    pub fn covariance_factor(&self) -> f64 {
        match *self {
            TailFamily::Gaussian | TailFamily::StudentT { .. } => 1.0,
            TailFamily::MixtureNormal { weight, inflation } => (1.0 - weight) + weight * inflation,
        }
    }

    fn radial<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            TailFamily::Gaussian => 1.0,
            TailFamily::StudentT { nu } => {
                // Gaussian part scaled by (ν-2)/ν so the draw has covariance Σ_fu.
                let chi = ChiSquared::new(nu).expect("validated nu").sample(rng);
                ((nu - 2.0) / chi).sqrt()
            }
            TailFamily::MixtureNormal { weight, inflation } => {
                if rng.random::<f64>() < weight {
                    inflation.sqrt()
                } else {
                    1.0
                }
            }
        }
    }
}

/// Population matrices of a factor model, all on the trace-`d` scatter scale
/// except `cov_x`.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub sigma0: DMatrix<f64>,
    pub sigma0_u: DMatrix<f64>,
    pub gamma_m: DMatrix<f64>,
    pub lambda_m: DVector<f64>,
    pub v0: DMatrix<f64>,
    /// `(c Σ_u)⁻¹`. The spectral residual `sigma0_u` has rank `d - m`, so the
    /// residual precision is taken on the idiosyncratic scatter instead.
    pub v0_u: DMatrix<f64>,
    /// Covariance of the draws for the Gaussian and Student-t families.
    pub cov_x: DMatrix<f64>,
}

impl GroundTruth {
    /// Covariance of draws from `tail`.
    pub fn covariance_for(&self, tail: &TailFamily) -> DMatrix<f64> {
        &self.cov_x * tail.covariance_factor()
    }
}

/// Draws the `d x m` loading matrix, column `j` i.i.d. `N(0, s_j)`.
pub fn build_loadings(spec: &FactorModelSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, LOADING_STREAM);
    let mut b = DMatrix::zeros(spec.d, spec.m);
    for (j, &s) in spec.loading_variances.iter().enumerate() {
        let sd = s.sqrt();
        for i in 0..spec.d {
            let z: f64 = StandardNormal.sample(&mut rng);
            b[(i, j)] = sd * z;
        }
    }
    Ok(b)
}

pub fn ground_truth(b: &DMatrix<f64>, sigma_u: &DMatrix<f64>) -> Result<GroundTruth> {
    let d = sigma_u.nrows();
    if sigma_u.ncols() != d || b.nrows() != d {
        return Err(Error::validation("loadings and idiosyncratic covariance disagree on d"));
    }
    let m = b.ncols();
    let total = b * b.transpose() + sigma_u;
    let trace = total.trace();
    if !(trace > 0.0) {
        return Err(Error::numeric("BBᵀ + Σ_u has non-positive trace"));
    }
    let c = d as f64 / trace;
    let mut sigma0 = &total * c;
    crate::linalg::symmetrize_in_place(&mut sigma0);
    let eig = eigendecompose(&sigma0)?;
    if eig.values.iter().any(|&v| v <= 0.0) {
        return Err(Error::numeric("BBᵀ + Σ_u is singular"));
    }
    let split = split_from_eigen(&sigma0, &eig, m)?;
    let v0 = spd_inverse(&sigma0)?;
    let v0_u = spd_inverse(&(sigma_u * c))?;
    Ok(GroundTruth {
        cov_x: sigma0.clone(),
        sigma0,
        sigma0_u: split.residual,
        gamma_m: split.gamma_m,
        lambda_m: split.lambda_m,
        v0,
        v0_u,
    })
}

/// A factor model with its loadings drawn, ready to sample repeatedly.
#[derive(Debug, Clone)]
pub struct FactorModel {
    pub loadings: DMatrix<f64>,
    pub sigma_u: DMatrix<f64>,
    /// `d / tr(BBᵀ + Σ_u)`.
    pub normalization: f64,
    chol_u: DMatrix<f64>,
}

impl FactorModel {
    pub fn new(spec: &FactorModelSpec) -> Result<Self> {
        let loadings = build_loadings(spec)?;
        Self::from_parts(loadings, spec.idiosyncratic_cov.clone())
    }

    pub fn from_parts(loadings: DMatrix<f64>, sigma_u: DMatrix<f64>) -> Result<Self> {
        let d = sigma_u.nrows();
        let trace = (&loadings * loadings.transpose()).trace() + sigma_u.trace();
        let chol_u = sigma_u
            .clone()
            .cholesky()
            .ok_or_else(|| Error::validation("idiosyncratic covariance is not positive definite"))?
            .l();
        Ok(Self {
            normalization: d as f64 / trace,
            loadings,
            sigma_u,
            chol_u,
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma_u.nrows()
    }

    pub fn ground_truth(&self) -> Result<GroundTruth> {
        ground_truth(&self.loadings, &self.sigma_u)
    }

    /// `n` i.i.d. rows `y = B f + u`.
    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        tail: &TailFamily,
        n: usize,
        rng: &mut R,
    ) -> Result<DataMatrix> {
        tail.validate()?;
        if n == 0 {
            return Err(Error::validation("sample size must be at least 1"));
        }
        let d = self.dim();
        let m = self.loadings.ncols();
        let scale = self.normalization.sqrt();
        let mut out = DMatrix::zeros(n, d);
        let mut f = DVector::zeros(m);
        let mut z = DVector::zeros(d);
        for i in 0..n {
            for v in f.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            for v in z.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let radial = tail.radial(rng);
            let y = (&self.loadings * &f + &self.chol_u * &z) * (scale * radial);
            out.set_row(i, &y.transpose());
        }
        Ok(out)
    }
}

/// Samples `n` rows from `spec` with the tail family applied jointly to `(f, u)`.
pub fn sample(spec: &FactorModelSpec, tail: &TailFamily, n: usize) -> Result<DataMatrix> {
    let model = FactorModel::new(spec)?;
    let mut rng = stream_rng(spec.seed, SAMPLE_STREAM);
    model.sample_with(tail, n, &mut rng)
}

/// How the idiosyncratic component is specified in a scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum IdiosyncraticSpec {
    Identity,
    /// `Σ_u = (ρ^{|i-j|})`.
    Ar1Covariance { rho: f64 },
    /// `Σ_u = V_u⁻¹` with `V_u = (ρ^{|i-j|})`.
    Ar1Precision { rho: f64 },
}

impl IdiosyncraticSpec {
    pub fn build(&self, d: usize) -> Result<DMatrix<f64>> {
        match *self {
            IdiosyncraticSpec::Identity => Ok(DMatrix::identity(d, d)),
            IdiosyncraticSpec::Ar1Covariance { rho } => {
                check_rho(rho)?;
                Ok(ar1_matrix(d, rho))
            }
            IdiosyncraticSpec::Ar1Precision { rho } => {
                check_rho(rho)?;
                spd_inverse(&ar1_matrix(d, rho))
            }
        }
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.abs() < 1.0 {
        Ok(())
    } else {
        Err(Error::validation(format!("AR(1) parameter must satisfy |rho| < 1, got {rho}")))
    }
}

/// The four simulation designs: Gaussian, t(4), t(2.2) and a 0.8/0.2 normal
/// mixture with tenfold inflation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    I,
    II,
    III,
    IV,
}

impl Scenario {
    pub fn tail(self) -> TailFamily {
        match self {
            Scenario::I => TailFamily::Gaussian,
            Scenario::II => TailFamily::StudentT { nu: 4.0 },
            Scenario::III => TailFamily::StudentT { nu: 2.2 },
            Scenario::IV => TailFamily::MixtureNormal {
                weight: 0.2,
                inflation: 10.0,
            },
        }
    }
}

/// Serializable description of a synthetic data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n: usize,
    pub d: usize,
    pub loading_variances: Vec<f64>,
    pub idiosyncratic: IdiosyncraticSpec,
    pub tail: TailFamily,
    /// Seed for the loading matrix.
    pub seed: u64,
}

impl ScenarioSpec {
    /// Three factors with loading variances `(1, 0.75², 0.5²)` and `Σ_u = (0.9^{|i-j|})`.
    pub fn standard(scenario: Scenario, n: usize, d: usize, seed: u64) -> Self {
        Self {
            n,
            d,
            loading_variances: vec![1.0, 0.75 * 0.75, 0.5 * 0.5],
            idiosyncratic: IdiosyncraticSpec::Ar1Covariance { rho: 0.9 },
            tail: scenario.tail(),
            seed,
        }
    }

    pub fn factors(&self) -> usize {
        self.loading_variances.len()
    }

    pub fn factor_model_spec(&self) -> Result<FactorModelSpec> {
        Ok(FactorModelSpec {
            d: self.d,
            m: self.factors(),
            loading_variances: self.loading_variances.clone(),
            idiosyncratic_cov: self.idiosyncratic.build(self.d)?,
            seed: self.seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::validation("n and d must be positive"));
        }
        self.tail.validate()?;
        self.factor_model_spec()?.validate()
    }
}
