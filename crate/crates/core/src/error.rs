use thiserror::Error;

/// Failures raised by tensor arithmetic and the differentiation tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("probe at coordinate {coordinate} produced a non-finite value")]
    Probe { coordinate: usize },
}

pub type MathResult<T> = std::result::Result<T, MathError>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("value error: {0}")]
    Value(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("calibration of outcome {outcome} failed: achieved rate {achieved:.5}, target {target:.5}")]
    Calibration {
        outcome: usize,
        achieved: f64,
        target: f64,
    },
    #[error("non-finite {term} loss at epoch {epoch}, batch {batch}")]
    NumericalAbort {
        term: String,
        epoch: usize,
        batch: usize,
    },
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Strips fold wrappers to reach the underlying failure.
    pub fn root(&self) -> &Error {
        match self {
            Error::Fold { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
