use thiserror::Error;

/// Error categories surfaced by the library. The CLI maps each variant to a
/// machine-readable category and exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: file has version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("prerequisite missing: {0}")]
    Prerequisite(String),

    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable, machine-readable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) | Error::Version { .. } => "checkpoint",
            Error::InvalidAction(_) => "invalid_action",
            Error::Prerequisite(_) => "prerequisite",
            Error::Incompatible(_) => "incompatible",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
