use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossBreakdown;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("no class has at least {min_class} labeled pixels; source pool would be empty")]
    EmptySource { min_class: usize },

    #[error("class {class} has {available} labeled pixels, needs more than {required}")]
    InsufficientSamples { class: u16, available: usize, required: usize },

    #[error("split error: {0}")]
    Split(String),

    #[error("episode construction failed: {0}")]
    Episode(String),

    #[error("class {0} has no support features")]
    MissingClass(usize),

    #[error("training diverged at iteration {iteration}: {breakdown:?}")]
    Divergence { iteration: usize, breakdown: Box<LossBreakdown> },

    #[error("checkpoint version mismatch: {0}")]
    Version(String),

    #[error("invalid synthetic scene spec: {0}")]
    Spec(String),

    #[error("incomplete: {0}")]
    Incomplete(String),

    #[error("file not found: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { field: field.into(), message: message.into() }
    }

    /// Process exit code: 1 runtime, 2 usage/config, 3 data format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::MissingPath(_) => 2,
            Error::Parse { .. } | Error::Shape(_) | Error::Version(_) | Error::Json(_) => 3,
            _ => 1,
        }
    }
}
