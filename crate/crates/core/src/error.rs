use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("feature count mismatch: expected {expected} columns, got {found}")]
    ColumnMismatch { expected: usize, found: usize },

    #[error("degenerate response: {0}")]
    DegenerateResponse(String),

    #[error("design matrix is rank deficient in columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("optimizer did not converge after {iterations} iterations (last bracket [{lower}, {upper}])")]
    NoConvergence {
        iterations: usize,
        lower: f64,
        upper: f64,
    },

    #[error("bootstrap failed: {succeeded} of {requested} replicates succeeded")]
    BootstrapFailed { succeeded: usize, requested: usize },

    #[error("method {method} failed on {failed} of {replicates} replicates")]
    MethodFailed {
        method: String,
        failed: usize,
        replicates: usize,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InsufficientData(_) => "insufficient_data",
            Error::InvalidInput(_) => "invalid_input",
            Error::ColumnMismatch { .. } => "column_mismatch",
            Error::DegenerateResponse(_) => "degenerate_response",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::NoConvergence { .. } => "no_convergence",
            Error::BootstrapFailed { .. } => "bootstrap_failed",
            Error::MethodFailed { .. } => "method_failed",
            Error::Schema(_) => "schema",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
