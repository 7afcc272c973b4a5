//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch in a tensor operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Rank-deficient regression design.
    #[error("singular design matrix: column {column} is linearly dependent")]
    Singular { column: usize },

    /// Series with no usable variation (e.g. constant input to a unit-root test).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Series too short for the requested analysis.
    #[error("series too short: length {len}, need at least {min}")]
    TooShort { len: usize, min: usize },

    /// Anchor with an empty contrastive denominator in literal equation mode.
    #[error("empty denominator for anchor {anchor} in literal equation mode")]
    EmptyDenominator { anchor: usize },

    /// Violation of an operation contract (e.g. backward from a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed file contents (manifest, values file, checkpoint).
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or configuration rather than a
    /// failure at runtime. The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Format { .. } | Error::TooShort { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
