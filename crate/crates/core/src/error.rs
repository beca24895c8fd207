use thiserror::Error;

/// Errors surfaced by the decoding pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A file does not parse or its declared shape disagrees with its payload.
    #[error("format error: {0}")]
    Format(String),

    /// Data violates a type invariant (non-finite values, unordered times, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Matrix or series shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument is outside its documented domain.
    #[error("argument error: {0}")]
    Argument(String),

    /// A token is not part of the model vocabulary.
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// A persisted artifact is missing pieces or its blobs do not match the manifest.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Model fitting failed on degenerate input.
    #[error("fit error: {0}")]
    Fit(String),

    /// A required configuration table is absent or empty.
    #[error("configuration error: {0}")]
    Config(String),

    /// A statistic is undefined on the given input (zero variance, constant ranks).
    #[error("undefined: {0}")]
    Undefined(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable code, used by the CLI error envelope.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Validation(_) => "validation",
            Error::Shape(_) => "shape",
            Error::Argument(_) => "argument",
            Error::Vocabulary(_) => "vocabulary",
            Error::Integrity(_) => "integrity",
            Error::Fit(_) => "fit",
            Error::Config(_) => "config",
            Error::Undefined(_) => "undefined",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// True for errors caused by invalid user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Format(_)
                | Error::Validation(_)
                | Error::Shape(_)
                | Error::Argument(_)
                | Error::Vocabulary(_)
                | Error::Config(_)
        )
    }
}
