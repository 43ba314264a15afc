use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not agree; carries both shapes.
    Dimension { expected: String, got: String },
    /// Invalid configuration (stride, divisibility, stability bound, schema).
    Config(String),
    /// Input outside the operation's domain (non-binary CA state, t <= 0, ...).
    Domain(String),
    /// API misuse (empty data set, non-scalar loss).
    Usage(String),
    /// A loss or gradient became NaN/Inf; carries the training context.
    NonFinite(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_error(expected: impl fmt::Debug, got: impl fmt::Debug) -> Error {
    Error::Dimension {
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}
