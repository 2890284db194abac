use thiserror::Error;

/// Errors raised by the modelling, fitting and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("every state emission underflowed at t = {t}")]
    DegenerateStep { t: usize },

    #[error(
        "inconsistent posterior inputs at t = {t}: zero predictive mass with nonzero numerator"
    )]
    InconsistentPosterior { t: usize },

    #[error("state {state} is empty (total posterior weight {weight:e})")]
    EmptyState { state: usize, weight: f64 },

    #[error("reducible transition matrix: states {absorbing:?} form a closed class")]
    Reducible { absorbing: Vec<usize> },

    #[error("log-likelihood decreased from {before} to {after} at iteration {iteration}")]
    LoglikDecrease {
        iteration: usize,
        before: f64,
        after: f64,
    },

    #[error("all {n_starts} starting values were screened out")]
    AllStartsScreened { n_starts: usize },

    #[error("singular Hessian (condition number {condition:e})")]
    SingularHessian { condition: f64 },

    #[error("data error at row {row}: {message}")]
    Data { row: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error category, used by the command-line front end to choose an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::InvalidModel(_) | Error::Dimension { .. } => {
                ErrorCategory::Usage
            }
            Error::Data { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_) => {
                ErrorCategory::Data
            }
            _ => ErrorCategory::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
