use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("ill-conditioned covariance factor: {0}")]
    IllConditioned(String),

    #[error("component {component} is empty (mass {mass:.3e})")]
    EmptyComponent { component: usize, mass: f64 },

    #[error("eigensolver did not converge after {restarts} restarts (dimension {dim})")]
    EigenNoConvergence { restarts: usize, dim: usize },

    #[error("{q} factors exceed the maximum of {max} admissible for p = {p}")]
    TooManyFactors { q: usize, p: usize, max: usize },

    #[error("fit failed after {} cycles: {reason}", trace.len().saturating_sub(1))]
    FitFailed { reason: String, trace: Vec<f64> },

    #[error("every start failed: {}", .0.join("; "))]
    AllStartsFailed(Vec<String>),

    #[error("every selection cell failed: {}", .0.join("; "))]
    AllCellsFailed(Vec<String>),

    #[error("overlap target {target} is unreachable; achievable range is [{min:.3e}, {max:.3e}]")]
    UnreachableOverlap { target: f64, min: f64, max: f64 },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
