use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("spatial median did not converge after {iterations} iterations (last step {last_step:.3e})")]
    LocationNotConverged {
        iterations: usize,
        last_step: f64,
        best: DVector<f64>,
    },

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    FixedPointNotConverged {
        iterations: usize,
        residual: f64,
        last: DMatrix<f64>,
    },

    #[error("CLIME column {column} is infeasible for tau = {tau}")]
    ClimeInfeasible { column: usize, tau: f64 },

    #[error("CLIME column {column} hit the pivot limit ({pivots}); best objective {objective:.6e}")]
    ClimeIterationLimit {
        column: usize,
        pivots: usize,
        objective: f64,
    },

    #[error("graphical lasso did not converge after {sweeps} sweeps (KKT residual {kkt:.3e})")]
    GlassoNotConverged {
        sweeps: usize,
        kkt: f64,
        objective_trace: Vec<f64>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
