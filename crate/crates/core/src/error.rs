use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("internal inconsistency: {0}")]
    Inconsistent(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("illegal segment {start}..{end}: {reason}")]
    IllegalSegment {
        start: usize,
        end: usize,
        reason: String,
    },

    #[error("illegal scheme: {0}")]
    IllegalScheme(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error objects.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::Shape(_) => "shape-error",
            Error::Inconsistent(_) => "internal-inconsistency",
            Error::DegenerateInput(_) => "degenerate-input",
            Error::Plan(_) => "plan-error",
            Error::IllegalSegment { .. } => "illegal-segment",
            Error::IllegalScheme(_) => "illegal-scheme",
            Error::Backend(_) => "backend-error",
            Error::Format(_) => "format-error",
            Error::Io(_) => "io-error",
            Error::Json(_) => "json-error",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
