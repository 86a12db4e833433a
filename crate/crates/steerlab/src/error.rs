//! Error taxonomy shared across the workspace.
//!
//! `Config` means the caller assembled inconsistent settings, `Usage` means an
//! API precondition was violated, `Numeric` means a value went non-finite.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric fault: {0}")]
    Numeric(String),

    #[error("missing artifact `{path}`: run the `{stage}` stage first")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn stage(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Stage { stage: stage.into(), message: message.into() }
    }
}
