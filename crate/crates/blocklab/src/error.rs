//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of its legal range or inconsistent.
    #[error("config: {0}")]
    Config(String),

    /// An argument violates an operation's preconditions.
    #[error("argument: {0}")]
    Argument(String),

    /// A stored artifact (corpus, checkpoint, manifest) is malformed.
    #[error("format: {0}")]
    Format(String),

    /// A loss or gradient became non-finite.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Required inputs for a command are missing.
    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Single-word category used for machine-parsable CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Argument(_) => "argument",
            Error::Format(_) => "format",
            Error::Numerical(_) => "numerical",
            Error::MissingInput(_) => "missing-input",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
