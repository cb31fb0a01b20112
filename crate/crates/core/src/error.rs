use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("column {column} is constant (value {value}); approximation interval is degenerate")]
    DegenerateInterval { column: usize, value: f64 },
    #[error("column {column} has zero variance after transformation")]
    ZeroVariance { column: usize },
    #[error("column {column} is identically zero and unpenalized; coefficient is unidentified")]
    ZeroColumn { column: usize },
    #[error("{solver} did not converge after {iterations} iterations (certificate {certificate:.3e})")]
    NotConverged {
        solver: &'static str,
        iterations: usize,
        certificate: f64,
        best: Vec<f64>,
    },
    #[error("singular basis encountered in {0}")]
    Singular(&'static str),
    #[error("cross-validation failed in fold {fold} at penalty {penalty}: {source}")]
    Fold {
        fold: usize,
        penalty: f64,
        #[source]
        source: Box<Error>,
    },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("panel: {0}")]
    Panel(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Solver and linear-algebra failures, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotConverged { .. } | Error::Singular(_) => true,
            Error::Fold { source, .. } | Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
