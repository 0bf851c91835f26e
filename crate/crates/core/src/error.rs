use thiserror::Error;

/// Errors raised by the simulation and analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no counts in side peaks; normalization undefined")]
    EmptySidePeaks,

    #[error("visibility undefined: {0}")]
    UndefinedVisibility(String),

    #[error("inconsistent input: {0}")]
    Inconsistent(String),

    #[error("fit did not converge after {iterations} iterations (deviance {objective:.6e}, last relative step {last_step:.3e})")]
    NonConvergence {
        iterations: usize,
        objective: f64,
        last_step: f64,
    },

    #[error("degenerate fit data: {0}")]
    Degenerate(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

/// Coarse classification used to map errors onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter { .. } | Error::Toml(_) => ErrorKind::Config,
            Error::NonConvergence { .. } | Error::Degenerate(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
