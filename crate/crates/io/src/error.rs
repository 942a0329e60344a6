use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("unsupported or corrupt image: {0}")]
    Decode(String),
    #[error("invalid raw ownership file: {0}")]
    Raw(String),
    #[error("png encoding failed: {0}")]
    Encode(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] sms_core::Error),
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;
