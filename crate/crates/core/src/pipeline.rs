//! End-to-end estimator pipelines: raw scatter, factor count, POET
//! thresholding, precision estimation and scale calibration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inverse, DataMatrix};
use crate::location::spatial_median_default;
use crate::poet::{
    default_constant_grid, poet_from_eigen, repair_pd, select_threshold_constant, threshold_level,
    PdRepair, ThresholdRule, DEFAULT_REPAIR_FLOOR, DEFAULT_THRESHOLD_CONSTANT,
};
use crate::precision::{estimate_precision, PrecisionEstimate, PrecisionMethod};
use crate::scale::{covariance_from_scatter, huber_scale_default, mahalanobis_radii, HuberScale};
use crate::scatter::{
    reg_tyler, regtyler_alpha_default, sample_covariance, spatial_sign_covariance, symmetrize,
    tyler_plugin, REG_TYLER_MAX_ITER, REG_TYLER_TOL,
};
use crate::spectral::{
    eigendecompose, estimate_num_factors, split_from_eigen, Eigen, FactorCriterion,
    DEFAULT_MAX_FACTORS,
};

pub const CV_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatterChoice {
    /// Sample covariance rescaled to trace `d`.
    Sample,
    SpatialSign,
    TylerPlugin,
    RegTyler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FactorCount {
    Known { m: usize },
    Er,
    Gr,
}

/// Precision initializer for the Tyler plug-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initializer {
    /// Inverse of the PD-repaired POET spatial-sign estimate.
    #[default]
    PoetInverse,
    /// `V̂₀` from the precision step applied to the spatial-sign split.
    Precision,
}

fn default_c() -> f64 {
    DEFAULT_THRESHOLD_CONSTANT
}

fn default_max_factors() -> usize {
    DEFAULT_MAX_FACTORS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoetStep {
    #[serde(default)]
    pub rule: ThresholdRule,
    #[serde(default = "default_c")]
    pub c: f64,
    /// Pick `c` by cross-validation over `0.1, …, 2.0` instead.
    #[serde(default)]
    pub cross_validate: bool,
    #[serde(default)]
    pub repair: bool,
}

impl Default for PoetStep {
    fn default() -> Self {
        Self {
            rule: ThresholdRule::Hard,
            c: DEFAULT_THRESHOLD_CONSTANT,
            cross_validate: false,
            repair: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionStep {
    pub method: PrecisionMethod,
    #[serde(default = "default_c")]
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub name: String,
    pub scatter_kind: ScatterChoice,
    #[serde(default)]
    pub poet: Option<PoetStep>,
    #[serde(default)]
    pub precision: Option<PrecisionStep>,
    pub factor_count: FactorCount,
    #[serde(default)]
    pub scale_calibration: bool,
    #[serde(default)]
    pub initializer: Initializer,
    #[serde(default = "default_max_factors")]
    pub max_factors: usize,
}

impl PipelineSpec {
    fn base(name: &str, scatter_kind: ScatterChoice, factor_count: FactorCount) -> Self {
        Self {
            name: name.to_string(),
            scatter_kind,
            poet: Some(PoetStep::default()),
            precision: None,
            factor_count,
            scale_calibration: false,
            initializer: Initializer::PoetInverse,
            max_factors: DEFAULT_MAX_FACTORS,
        }
    }

    pub fn sample(factor_count: FactorCount) -> Self {
        Self::base("SAMPLE", ScatterChoice::Sample, factor_count)
    }

    pub fn poet_ss(factor_count: FactorCount) -> Self {
        Self::base("POET-SS", ScatterChoice::SpatialSign, factor_count)
    }

    pub fn poet_tme(factor_count: FactorCount) -> Self {
        Self::base("POET-TME", ScatterChoice::TylerPlugin, factor_count)
    }

    pub fn reg_tme(factor_count: FactorCount) -> Self {
        Self::base("RegTME", ScatterChoice::RegTyler, factor_count)
    }

    pub fn with_precision(mut self, method: PrecisionMethod) -> Self {
        self.precision = Some(PrecisionStep {
            method,
            c: DEFAULT_THRESHOLD_CONSTANT,
        });
        self
    }

    pub fn with_scale(mut self) -> Self {
        self.scale_calibration = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::validation("pipeline name must not be empty"));
        }
        if self.max_factors == 0 {
            return Err(Error::validation(format!("{}: max_factors must be positive", self.name)));
        }
        if let Some(p) = &self.poet {
            p.rule.validate()?;
            if !(p.c > 0.0) {
                return Err(Error::validation(format!("{}: threshold constant must be positive", self.name)));
            }
        }
        if let Some(p) = &self.precision {
            if !(p.c > 0.0) {
                return Err(Error::validation(format!("{}: precision constant must be positive", self.name)));
            }
        }
        if self.scatter_kind == ScatterChoice::TylerPlugin {
            match self.initializer {
                Initializer::PoetInverse if self.poet.is_none() => {
                    return Err(Error::validation(format!(
                        "{}: the Tyler plug-in needs a POET step for its spatial-sign initializer",
                        self.name
                    )))
                }
                Initializer::Precision if self.precision.is_none() => {
                    return Err(Error::validation(format!(
                        "{}: the precision initializer needs a precision step",
                        self.name
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn needs_spatial_median(&self) -> bool {
        matches!(
            self.scatter_kind,
            ScatterChoice::SpatialSign | ScatterChoice::TylerPlugin
        ) || (self.scale_calibration && self.scatter_kind == ScatterChoice::RegTyler)
    }
}

/// Everything a pipeline produces on one data set.
#[derive(Debug, Clone)]
pub struct PipelineFit {
    /// Final scatter estimate (thresholded when a POET step is configured).
    pub scatter: DMatrix<f64>,
    /// Eigensystem of the raw scatter the POET step started from.
    pub pilot: Eigen,
    pub m: usize,
    /// Thresholded (or raw) idiosyncratic part.
    pub residual: DMatrix<f64>,
    pub threshold: Option<f64>,
    pub precision: Option<PrecisionEstimate>,
    pub covariance: Option<DMatrix<f64>>,
    pub scale: Option<HuberScale>,
    pub center: DVector<f64>,
}

impl PipelineFit {
    /// Inverse scatter: `V̂₀` when a precision step ran, otherwise the inverse
    /// of the final scatter.
    pub fn inverse_scatter(&self) -> Result<DMatrix<f64>> {
        match &self.precision {
            Some(p) => Ok(p.v0.clone()),
            None => inverse(&self.scatter),
        }
    }
}

fn choose_m(count: FactorCount, eig: &Eigen, n: usize, d: usize, max_factors: usize) -> Result<usize> {
    match count {
        FactorCount::Known { m } => {
            if m > d {
                return Err(Error::validation(format!("m = {m} exceeds d = {d}")));
            }
            Ok(m)
        }
        FactorCount::Er | FactorCount::Gr => {
            let k = n.min(d);
            if k < 3 {
                return Err(Error::validation("factor selection needs min(n, d) ≥ 3"));
            }
            let bound = max_factors.min(k - 2);
            let method = if count == FactorCount::Er {
                FactorCriterion::Er
            } else {
                FactorCriterion::Gr
            };
            Ok(estimate_num_factors(eig.values.as_slice(), bound, method, n, d)?.m_hat)
        }
    }
}

fn raw_scatter(kind: ScatterChoice, x: &DataMatrix, mu: Option<&DVector<f64>>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let need_mu = || mu.cloned().ok_or_else(|| Error::validation("spatial median missing"));
    Ok(match kind {
        ScatterChoice::Sample => {
            let s = sample_covariance(x, true)?;
            (s.matrix, s.center)
        }
        ScatterChoice::SpatialSign => {
            let mu = need_mu()?;
            (spatial_sign_covariance(x, &mu)?.matrix, mu)
        }
        ScatterChoice::RegTyler => {
            let xs = symmetrize(x)?;
            let alpha = regtyler_alpha_default(&xs, x.nrows())?;
            let fit = reg_tyler(&xs, alpha, REG_TYLER_TOL, REG_TYLER_MAX_ITER)?;
            let center = mu.cloned().unwrap_or_else(|| DVector::zeros(x.ncols()));
            (fit.estimate.matrix, center)
        }
        ScatterChoice::TylerPlugin => unreachable!("plug-in handled by fit_pipeline"),
    })
}

struct PoetStage {
    scatter: DMatrix<f64>,
    pilot: Eigen,
    m: usize,
    residual: DMatrix<f64>,
    threshold: Option<f64>,
    precision: Option<PrecisionEstimate>,
}

fn poet_stage(
    spec: &PipelineSpec,
    kind: ScatterChoice,
    raw: DMatrix<f64>,
    x: &DataMatrix,
    mu: Option<&DVector<f64>>,
    force_repair: bool,
) -> Result<PoetStage> {
    let (n, d) = x.shape();
    let pilot = eigendecompose(&raw)?;
    let m = choose_m(spec.factor_count, &pilot, n, d, spec.max_factors)?;
    let split = split_from_eigen(&raw, &pilot, m)?;
    let precision = match &spec.precision {
        Some(p) => Some(estimate_precision(&split, p.method, threshold_level(n, d, p.c)?)?),
        None => None,
    };
    let Some(step) = spec.poet else {
        return Ok(PoetStage {
            scatter: raw,
            pilot,
            m,
            residual: split.residual,
            threshold: None,
            precision,
        });
    };
    let c = if step.cross_validate {
        let estimator = |rows: &DataMatrix| -> Result<DMatrix<f64>> {
            let kind = if kind == ScatterChoice::TylerPlugin {
                ScatterChoice::SpatialSign
            } else {
                kind
            };
            Ok(raw_scatter(kind, rows, mu)?.0)
        };
        select_threshold_constant(x, m, step.rule, &default_constant_grid(), CV_FOLDS, estimator)?.constant
    } else {
        step.c
    };
    let tau = threshold_level(n, d, c)?;
    let repair = if step.repair || force_repair {
        PdRepair::on()
    } else {
        PdRepair::Off
    };
    let fit = poet_from_eigen(&raw, &pilot, m, tau, step.rule, repair)?;
    Ok(PoetStage {
        scatter: fit.sigma_tau,
        pilot,
        m,
        residual: fit.sigma_u_tau,
        threshold: Some(tau),
        precision,
    })
}

/// Fits `spec` on `x`. `location` is reused when supplied, otherwise the
/// spatial median is computed if the pipeline needs it.
pub fn fit_pipeline(spec: &PipelineSpec, x: &DataMatrix, location: Option<&DVector<f64>>) -> Result<PipelineFit> {
    spec.validate()?;
    let computed;
    let mu = match location {
        Some(mu) => Some(mu),
        None if spec.needs_spatial_median() => {
            computed = spatial_median_default(x)?.mu_hat;
            Some(&computed)
        }
        None => None,
    };

    let (stage, center) = if spec.scatter_kind == ScatterChoice::TylerPlugin {
        let mu = mu.ok_or_else(|| Error::validation("spatial median missing"))?;
        let (ss, _) = raw_scatter(ScatterChoice::SpatialSign, x, Some(mu))?;
        let init = poet_stage(spec, ScatterChoice::SpatialSign, ss, x, Some(mu), true)?;
        let v_s = match spec.initializer {
            Initializer::PoetInverse => inverse(&init.scatter)?,
            Initializer::Precision => init
                .precision
                .as_ref()
                .map(|p| p.v0.clone())
                .ok_or_else(|| Error::validation("precision initializer requested without a precision step"))?,
        };
        let plug = tyler_plugin(x, mu, &v_s, 1, None)?;
        (
            poet_stage(spec, ScatterChoice::TylerPlugin, plug.matrix, x, Some(mu), false)?,
            mu.clone(),
        )
    } else {
        let (raw, center) = raw_scatter(spec.scatter_kind, x, mu)?;
        (poet_stage(spec, spec.scatter_kind, raw, x, mu, false)?, center)
    };

    let (covariance, scale) = if spec.scale_calibration {
        let v = match &stage.precision {
            Some(p) => p.v0.clone(),
            None => inverse(&repair_pd(&stage.scatter, DEFAULT_REPAIR_FLOOR)?)?,
        };
        let radii = mahalanobis_radii(x, &center, &v)?;
        let theta = huber_scale_default(&radii)?;
        (Some(covariance_from_scatter(&stage.scatter, &theta)?), Some(theta))
    } else {
        (None, None)
    };

    Ok(PipelineFit {
        scatter: stage.scatter,
        pilot: stage.pilot,
        m: stage.m,
        residual: stage.residual,
        threshold: stage.threshold,
        precision: stage.precision,
        covariance,
        scale,
        center,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elliptical::{FactorModel, Scenario, ScenarioSpec, stream_rng};

    fn data(n: usize, d: usize) -> DataMatrix {
        let spec = ScenarioSpec::standard(Scenario::II, n, d, 4);
        let model = FactorModel::new(&spec.factor_model_spec().unwrap()).unwrap();
        model.sample_with(&spec.tail, n, &mut stream_rng(9, 1)).unwrap()
    }

    #[test]
    fn poet_tme_composes_explicitly() {
        let x = data(80, 30);
        let known = FactorCount::Known { m: 3 };
        let spec = PipelineSpec::poet_tme(known);
        let fit = fit_pipeline(&spec, &x, None).unwrap();

        let mu = spatial_median_default(&x).unwrap().mu_hat;
        let ss = spatial_sign_covariance(&x, &mu).unwrap().matrix;
        let tau = threshold_level(80, 30, DEFAULT_THRESHOLD_CONSTANT).unwrap();
        let init = crate::poet::poet_with(&ss, 3, tau, ThresholdRule::Hard, PdRepair::on()).unwrap();
        let v_s = inverse(&init.sigma_tau).unwrap();
        let plug = tyler_plugin(&x, &mu, &v_s, 1, None).unwrap().matrix;
        let expected = crate::poet::poet(&plug, 3, tau, ThresholdRule::Hard).unwrap().sigma_tau;
        assert!(crate::linalg::max_abs(&(fit.scatter - expected)) < 1e-12);
    }

    #[test]
    fn every_scatter_kind_runs() {
        let x = data(60, 20);
        for spec in [
            PipelineSpec::sample(FactorCount::Gr),
            PipelineSpec::poet_ss(FactorCount::Er),
            PipelineSpec::poet_tme(FactorCount::Known { m: 3 }).with_precision(PrecisionMethod::Glasso),
            PipelineSpec::reg_tme(FactorCount::Known { m: 3 }).with_scale(),
        ] {
            let fit = fit_pipeline(&spec, &x, None).unwrap();
            assert!((fit.scatter.trace() - 20.0).abs() < 1e-8, "{}", spec.name);
        }
    }

    #[test]
    fn plugin_without_initializer_is_rejected() {
        let mut spec = PipelineSpec::poet_tme(FactorCount::Gr);
        spec.poet = None;
        assert!(spec.validate().is_err());
        spec.initializer = Initializer::Precision;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn pipeline_spec_json_defaults() {
        let spec: PipelineSpec = serde_json::from_str(
            r#"{"name":"x","scatter_kind":"spatial_sign","poet":{"rule":{"rule":"soft"}},"factor_count":{"type":"gr"}}"#,
        )
        .unwrap();
        assert_eq!(spec.poet.unwrap().c, DEFAULT_THRESHOLD_CONSTANT);
        assert_eq!(spec.max_factors, DEFAULT_MAX_FACTORS);
    }
}
