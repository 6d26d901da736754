use thiserror::Error;

/// Errors raised across the gazeswap toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("out of domain: {0}")]
    OutOfDomain(String),

    #[error("head pose estimation failed: {0}")]
    EstimationFailed(String),

    #[error("poisson blend failed to converge (relative residual {residual:.3e} after {iterations} iterations)")]
    BlendFailed { residual: f64, iterations: usize },

    #[error("no match: {0}")]
    NoMatch(String),

    #[error("descent diverged at step {step}")]
    Diverged { step: usize },

    // the cause is part of the message, so it is not also exposed as a source
    #[error("i/o error on {path}: {cause}")]
    Io { path: String, cause: std::io::Error },

    #[error("image error on {path}: {message}")]
    Image { path: String, message: String },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("{path}: {} invalid record(s); first: {}", issues.len(), issues.first().map(|i| i.to_string()).unwrap_or_default())]
    Records {
        path: String,
        issues: Vec<crate::dataset_io::RecordIssue>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::OutOfDomain(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            cause,
        }
    }
}
