use thiserror::Error;

/// Failure modes shared by every solver layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The bracket for a monotone root could not be closed; the loss is
    /// most likely not bi-Lipschitz on the explored range.
    #[error("no root: {0}")]
    NoRoot(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("degenerate basis: {0}")]
    DegenerateBasis(String),

    #[error("inconsistent terminal value {terminal} outside [{lower}, {upper}]")]
    InconsistentTerminal { terminal: f64, lower: f64, upper: f64 },

    #[error("oracle too large: {steps} steps exceeds the enumeration limit {limit}")]
    OracleTooLarge { steps: usize, limit: usize },

    #[error("Picard iteration did not converge after {iterations} iterations (last distance {distance:e})")]
    NoConvergence { iterations: usize, distance: f64 },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
