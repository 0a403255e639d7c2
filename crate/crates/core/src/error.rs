use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("forward closure is not deterministic: baseline {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("gradient check failed on {failed} of {total} instances")]
    GradCheckFailed { failed: usize, total: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("index {index} out of range for {what} (size {size})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("bad magic bytes {0:?}, expected \"TNSF\"")]
    BadMagic([u8; 4]),

    #[error("unsupported TNSF version {0}")]
    BadVersion(u8),

    #[error("unsupported TNSF dtype code {0}")]
    BadDtype(u8),

    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("schema violation at {path}: {detail}")]
    Schema { path: String, detail: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn schema(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True for failures of the arithmetic itself (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonDeterministic { .. } | Error::GradCheckFailed { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
