//! Monte-Carlo experiments: replicate data sets, fit pipelines, score them
//! against the ground truth and aggregate.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elliptical::{stream_rng, FactorModel, GroundTruth, ScenarioSpec};
use crate::error::{Error, Result};
use crate::location::spatial_median_default;
use crate::norms;
use crate::pipeline::{fit_pipeline, PipelineFit, PipelineSpec, ScatterChoice};
use crate::scatter::{sample_covariance, spatial_sign_covariance};
use crate::spectral::{eigenvalues, estimate_num_factors, FactorCriterion, DEFAULT_MAX_FACTORS};

/// Replicate `r` draws from stream `REPLICATE_STREAM_OFFSET + r`.
const REPLICATE_STREAM_OFFSET: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `‖Σ̂₀ - Σ₀‖_max`
    ScatterMax,
    /// `‖Σ̂₀ - Σ₀‖_{Σ₀}`
    ScatterRelFrobenius,
    /// `‖Λ̂_m Λ_m⁻¹ - I‖_max` on the pilot eigenvalues.
    EigenvalueRatio,
    /// `√d ‖Γ̂_m - Γ_m‖_max` on the pilot eigenvectors.
    EigenvectorMax,
    /// `‖Σ̂_{0u} - Σ_{0u}‖₂`
    ResidualSpectral,
    CovarianceMax,
    CovarianceSpectral,
    CovarianceRelFrobenius,
    PrecisionFrobenius,
    PrecisionMax,
    PrecisionSpectral,
    ResidualPrecisionFrobenius,
    ResidualPrecisionMax,
    ResidualPrecisionSpectral,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::ScatterMax => "scatter_max",
            Metric::ScatterRelFrobenius => "scatter_rel_frobenius",
            Metric::EigenvalueRatio => "eigenvalue_ratio",
            Metric::EigenvectorMax => "eigenvector_max",
            Metric::ResidualSpectral => "residual_spectral",
            Metric::CovarianceMax => "covariance_max",
            Metric::CovarianceSpectral => "covariance_spectral",
            Metric::CovarianceRelFrobenius => "covariance_rel_frobenius",
            Metric::PrecisionFrobenius => "precision_frobenius",
            Metric::PrecisionMax => "precision_max",
            Metric::PrecisionSpectral => "precision_spectral",
            Metric::ResidualPrecisionFrobenius => "residual_precision_frobenius",
            Metric::ResidualPrecisionMax => "residual_precision_max",
            Metric::ResidualPrecisionSpectral => "residual_precision_spectral",
        }
    }

    /// Scatter-table metrics.
    pub fn scatter_set() -> Vec<Metric> {
        vec![
            Metric::ScatterMax,
            Metric::EigenvalueRatio,
            Metric::EigenvectorMax,
            Metric::ScatterRelFrobenius,
            Metric::ResidualSpectral,
        ]
    }

    /// Precision-table metrics.
    pub fn precision_set() -> Vec<Metric> {
        vec![
            Metric::PrecisionFrobenius,
            Metric::ResidualPrecisionFrobenius,
            Metric::PrecisionMax,
            Metric::ResidualPrecisionMax,
            Metric::PrecisionSpectral,
            Metric::ResidualPrecisionSpectral,
        ]
    }

    fn applicable(self, spec: &PipelineSpec) -> bool {
        match self {
            Metric::CovarianceMax | Metric::CovarianceSpectral | Metric::CovarianceRelFrobenius => {
                spec.scale_calibration
            }
            Metric::PrecisionFrobenius
            | Metric::PrecisionMax
            | Metric::PrecisionSpectral
            | Metric::ResidualPrecisionFrobenius
            | Metric::ResidualPrecisionMax
            | Metric::ResidualPrecisionSpectral => spec.precision.is_some(),
            _ => true,
        }
    }

    fn score(self, fit: &PipelineFit, truth: &GroundTruth, covariance: &DMatrix<f64>) -> Result<f64> {
        let m = truth.lambda_m.len();
        let missing = || Error::validation(format!("metric {} not available", self.name()));
        Ok(match self {
            Metric::ScatterMax => norms::max_norm(&(&fit.scatter - &truth.sigma0)),
            Metric::ScatterRelFrobenius => norms::rel_frobenius(&(&fit.scatter - &truth.sigma0), &truth.sigma0)?,
            Metric::EigenvalueRatio => {
                let hat: Vec<f64> = fit.pilot.values.iter().take(m).copied().collect();
                norms::ratio_error(&hat, truth.lambda_m.as_slice())?
            }
            Metric::EigenvectorMax => {
                let hat = fit.pilot.vectors.columns(0, m).into_owned();
                norms::eigvec_error(&hat, &truth.gamma_m)?
            }
            Metric::ResidualSpectral => norms::spectral(&(&fit.residual - &truth.sigma0_u)),
            Metric::CovarianceMax => norms::max_norm(&(fit.covariance.as_ref().ok_or_else(missing)? - covariance)),
            Metric::CovarianceSpectral => norms::spectral(&(fit.covariance.as_ref().ok_or_else(missing)? - covariance)),
            Metric::CovarianceRelFrobenius => {
                norms::rel_frobenius(&(fit.covariance.as_ref().ok_or_else(missing)? - covariance), covariance)?
            }
            Metric::PrecisionFrobenius => norms::frobenius(&(&fit.precision.as_ref().ok_or_else(missing)?.v0 - &truth.v0)),
            Metric::PrecisionMax => norms::max_norm(&(&fit.precision.as_ref().ok_or_else(missing)?.v0 - &truth.v0)),
            Metric::PrecisionSpectral => norms::spectral(&(&fit.precision.as_ref().ok_or_else(missing)?.v0 - &truth.v0)),
            Metric::ResidualPrecisionFrobenius => {
                norms::frobenius(&(&fit.precision.as_ref().ok_or_else(missing)?.v0_u - &truth.v0_u))
            }
            Metric::ResidualPrecisionMax => {
                norms::max_norm(&(&fit.precision.as_ref().ok_or_else(missing)?.v0_u - &truth.v0_u))
            }
            Metric::ResidualPrecisionSpectral => {
                norms::spectral(&(&fit.precision.as_ref().ok_or_else(missing)?.v0_u - &truth.v0_u))
            }
        })
    }
}

pub const DEFAULT_REPS: usize = 50;

fn default_reps() -> usize {
    DEFAULT_REPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub pipelines: Vec<PipelineSpec>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "Metric::scatter_set")]
    pub metrics: Vec<Metric>,
    /// Seed for the replicate draws; the loadings use `scenario.seed`.
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::validation("reps must be at least 1"));
        }
        if self.pipelines.is_empty() {
            return Err(Error::validation("no pipelines configured"));
        }
        if self.metrics.is_empty() {
            return Err(Error::validation("no metrics configured"));
        }
        self.scenario.validate()?;
        let mut names: Vec<&str> = self.pipelines.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("pipeline names must be unique"));
        }
        for p in &self.pipelines {
            p.validate()?;
            for metric in &self.metrics {
                if !metric.applicable(p) {
                    return Err(Error::validation(format!(
                        "metric {} does not apply to pipeline {}",
                        metric.name(),
                        p.name
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub pipeline: String,
    pub metric: String,
    /// `None` when the pipeline failed on this replicate.
    pub value: Option<f64>,
    pub replicate: usize,
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub pipeline: String,
    pub metric: String,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub table: ResultTable,
    pub replicates: Vec<ReplicateResult>,
}

/// Mean and `n - 1` standard deviation; `sd = 0` for a single value.
pub fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), Some(0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

fn run_replicate(
    config: &ExperimentConfig,
    model: &FactorModel,
    truth: &GroundTruth,
    covariance: &DMatrix<f64>,
    r: usize,
) -> Vec<ReplicateResult> {
    let mut rng = stream_rng(config.seed, REPLICATE_STREAM_OFFSET + r as u64);
    let mut out = Vec::with_capacity(config.pipelines.len() * config.metrics.len());
    let x = model.sample_with(&config.scenario.tail, config.scenario.n, &mut rng);
    let needs_mu = config.pipelines.iter().any(|p| p.needs_spatial_median());
    let mu = match (&x, needs_mu) {
        (Ok(x), true) => Some(spatial_median_default(x).map(|l| l.mu_hat)),
        _ => None,
    };
    for p in &config.pipelines {
        let start = Instant::now();
        let fit = match (&x, &mu) {
            (Err(e), _) => Err(Error::numeric(e.to_string())),
            (Ok(_), Some(Err(e))) if p.needs_spatial_median() => Err(Error::numeric(e.to_string())),
            (Ok(x), mu) => fit_pipeline(p, x, mu.as_ref().and_then(|m| m.as_ref().ok())),
        };
        let elapsed = start.elapsed().as_secs_f64();
        if let Err(e) = &fit {
            log::warn!("replicate {r}: pipeline {} failed: {e}", p.name);
        }
        for metric in &config.metrics {
            let value = fit
                .as_ref()
                .ok()
                .and_then(|f| metric.score(f, truth, covariance).ok())
                .filter(|v| v.is_finite());
            out.push(ReplicateResult {
                pipeline: p.name.clone(),
                metric: metric.name().to_string(),
                value,
                replicate: r,
                elapsed,
            });
        }
    }
    out
}

/// Aggregates per-replicate results in (pipeline, metric) configuration order.
pub fn aggregate(config: &ExperimentConfig, replicates: &[ReplicateResult]) -> ResultTable {
    let mut rows = Vec::new();
    for p in &config.pipelines {
        for metric in &config.metrics {
            let cell: Vec<&ReplicateResult> = replicates
                .iter()
                .filter(|r| r.pipeline == p.name && r.metric == metric.name())
                .collect();
            let values: Vec<f64> = cell.iter().filter_map(|r| r.value).collect();
            let (mean, sd) = mean_sd(&values);
            rows.push(TableRow {
                pipeline: p.name.clone(),
                metric: metric.name().to_string(),
                mean,
                sd,
                failures: cell.len() - values.len(),
            });
        }
    }
    ResultTable { rows }
}

/// Runs all replicates (in parallel) and aggregates them.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let model = FactorModel::new(&config.scenario.factor_model_spec()?)?;
    let truth = model.ground_truth()?;
    let covariance = truth.covariance_for(&config.scenario.tail);
    let replicates: Vec<ReplicateResult> = (0..config.reps)
        .into_par_iter()
        .map(|r| run_replicate(config, &model, &truth, &covariance, r))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(ExperimentOutput {
        table: aggregate(config, &replicates),
        replicates,
    })
}

// ---------------------------------------------------------------------------
// Factor-count experiment
// ---------------------------------------------------------------------------

fn default_methods() -> Vec<FactorCriterion> {
    vec![FactorCriterion::Er, FactorCriterion::Gr]
}

fn default_scatter() -> ScatterChoice {
    ScatterChoice::SpatialSign
}

fn default_max() -> usize {
    DEFAULT_MAX_FACTORS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorCountConfig {
    /// Base design; `d` is replaced by each entry of `d_grid`.
    pub scenario: ScenarioSpec,
    pub d_grid: Vec<usize>,
    #[serde(default = "default_methods")]
    pub methods: Vec<FactorCriterion>,
    #[serde(default = "default_max")]
    pub max_factors: usize,
    pub reps: usize,
    #[serde(default = "default_scatter")]
    pub scatter_kind: ScatterChoice,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub d: usize,
    pub method: FactorCriterion,
    /// `frequencies[k]` is the share of replicates with `m̂ = k + 1`.
    pub frequencies: Vec<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub max_factors: usize,
    pub rows: Vec<FrequencyRow>,
}

impl FrequencyRow {
    pub fn frequency_of(&self, m: usize) -> f64 {
        if m == 0 {
            return 0.0;
        }
        self.frequencies.get(m - 1).copied().unwrap_or(0.0)
    }
}

fn pilot_eigenvalues(kind: ScatterChoice, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let s = match kind {
        ScatterChoice::Sample => sample_covariance(x, true)?.matrix,
        ScatterChoice::SpatialSign => {
            let mu = spatial_median_default(x)?.mu_hat;
            spatial_sign_covariance(x, &mu)?.matrix
        }
        other => {
            let spec = PipelineSpec {
                name: "pilot".into(),
                scatter_kind: other,
                poet: Some(Default::default()),
                precision: None,
                factor_count: crate::pipeline::FactorCount::Known { m: 0 },
                scale_calibration: false,
                initializer: Default::default(),
                max_factors: DEFAULT_MAX_FACTORS,
            };
            fit_pipeline(&spec, x, None)?.scatter
        }
    };
    Ok(eigenvalues(&s)?.as_slice().to_vec())
}

/// Empirical distribution of `m̂` for every `(d, method)`.
pub fn run_factor_count_experiment(config: &FactorCountConfig) -> Result<FrequencyTable> {
    if config.reps == 0 {
        return Err(Error::validation("reps must be at least 1"));
    }
    if config.d_grid.is_empty() || config.methods.is_empty() {
        return Err(Error::validation("empty d grid or method list"));
    }
    if config.max_factors == 0 {
        return Err(Error::validation("max_factors must be positive"));
    }
    let m = config.scenario.factors();
    let mut rows = Vec::new();
    for (k, &d) in config.d_grid.iter().enumerate() {
        if d < m + 2 {
            return Err(Error::validation(format!("d = {d} leaves too few eigenvalues for m = {m}")));
        }
        let mut scenario = config.scenario.clone();
        scenario.d = d;
        scenario.validate()?;
        let n = scenario.n;
        let bound = config.max_factors.min(n.min(d).saturating_sub(2));
        if bound == 0 {
            return Err(Error::validation("min(n, d) too small for factor selection"));
        }
        let model = FactorModel::new(&scenario.factor_model_spec()?)?;
        let picks: Vec<Vec<Option<usize>>> = (0..config.reps)
            .into_par_iter()
            .map(|r| {
                let stream = REPLICATE_STREAM_OFFSET + (k * config.reps + r) as u64;
                let mut rng = stream_rng(config.seed, stream);
                let eigs = model
                    .sample_with(&scenario.tail, n, &mut rng)
                    .and_then(|x| pilot_eigenvalues(config.scatter_kind, &x));
                config
                    .methods
                    .iter()
                    .map(|&method| {
                        eigs.as_ref()
                            .ok()
                            .and_then(|e| estimate_num_factors(e, bound, method, n, d).ok())
                            .map(|res| res.m_hat)
                    })
                    .collect()
            })
            .collect();
        for (j, &method) in config.methods.iter().enumerate() {
            let mut counts = vec![0usize; config.max_factors];
            let mut failures = 0;
            for rep in &picks {
                match rep[j] {
                    Some(mh) => counts[mh - 1] += 1,
                    None => failures += 1,
                }
            }
            rows.push(FrequencyRow {
                d,
                method,
                frequencies: counts
                    .iter()
                    .map(|&c| c as f64 / config.reps as f64)
                    .collect(),
                failures,
            });
        }
    }
    Ok(FrequencyTable {
        max_factors: config.max_factors,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
    Text,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn align(header: &[&str], body: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i < 2 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    for row in body {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

impl ResultTable {
    pub const CSV_HEADER: [&'static str; 5] = ["pipeline", "metric", "mean", "sd", "failures"];

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.pipeline.clone(),
                r.metric.clone(),
                r.mean.map(|v| v.to_string()).unwrap_or_default(),
                r.sd.map(|v| v.to_string()).unwrap_or_default(),
                r.failures.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.pipeline.clone(),
                    r.metric.clone(),
                    fmt_opt(r.mean),
                    fmt_opt(r.sd),
                    r.failures.to_string(),
                ]
            })
            .collect();
        align(&Self::CSV_HEADER, &body)
    }

    pub fn render(&self, format: OutputFormat) -> Result<String> {
        Ok(match format {
            OutputFormat::Csv => self.to_csv()?,
            OutputFormat::Json => serde_json::to_string_pretty(self)? + "\n",
            OutputFormat::Text => self.to_text(),
        })
    }

    pub fn get(&self, pipeline: &str, metric: Metric) -> Option<&TableRow> {
        self.rows
            .iter()
            .find(|r| r.pipeline == pipeline && r.metric == metric.name())
    }
}

impl FrequencyTable {
    pub fn render(&self, format: OutputFormat) -> Result<String> {
        let mut header: Vec<String> = vec!["d".into(), "method".into()];
        header.extend((1..=self.max_factors).map(|k| format!("m{k}")));
        header.push("failures".into());
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.d.to_string(),
                    match r.method {
                        FactorCriterion::Er => "ER".into(),
                        FactorCriterion::Gr => "GR".into(),
                    },
                ];
                row.extend(r.frequencies.iter().map(|f| format!("{f:.3}")));
                row.push(r.failures.to_string());
                row
            })
            .collect();
        Ok(match format {
            OutputFormat::Json => serde_json::to_string_pretty(self)? + "\n",
            OutputFormat::Text => {
                let h: Vec<&str> = header.iter().map(String::as_str).collect();
                align(&h, &body)
            }
            OutputFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(&header)?;
                for row in &body {
                    w.write_record(row)?;
                }
                let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
                String::from_utf8(bytes).expect("csv output is utf-8")
            }
        })
    }

    pub fn get(&self, d: usize, method: FactorCriterion) -> Option<&FrequencyRow> {
        self.rows.iter().find(|r| r.d == d && r.method == method)
    }
}

/// Writes `content` to `path`, or to stdout when `path` is `None`.
pub fn emit(content: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, content)?,
        None => std::io::stdout().write_all(content.as_bytes())?,
    }
    Ok(())
}
