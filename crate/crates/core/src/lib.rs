//! Robust factor-model scatter, covariance and precision estimation for
//! heavy-tailed elliptical data.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod elliptical;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod location;
pub mod norms;
pub mod pipeline;
pub mod poet;
pub mod precision;
pub mod scale;
pub mod scatter;
pub mod spectral;

pub use elliptical::{FactorModel, FactorModelSpec, GroundTruth, Scenario, ScenarioSpec, TailFamily};
pub use error::{Error, Result};
pub use location::{spatial_median, LocationEstimate};
pub use norms::ErrorReport;
pub use pipeline::{fit_pipeline, FactorCount, PipelineFit, PipelineSpec, ScatterChoice};
pub use poet::{poet, PdRepair, PoetEstimate, ThresholdRule};
pub use precision::{PrecisionEstimate, PrecisionMethod};
pub use scale::HuberScale;
pub use scatter::{ScatterEstimate, ScatterKind};
pub use spectral::{FactorCriterion, FactorCountResult, SpectralSplit};
