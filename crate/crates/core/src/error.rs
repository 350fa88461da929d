use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SaicError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SaicError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("audio decode error: {0}")]
    Audio(String),

    #[error("invalid config at `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("feature-config fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint checksum mismatch: file is corrupt or truncated")]
    Checksum,

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("wrong checkpoint stage: expected {expected}, found {found}")]
    StageMismatch { expected: String, found: String },

    #[error("non-finite loss in {context}")]
    NonFiniteLoss { context: String },

    #[error("verification oracle below floor: held-out top-1 {accuracy:.4} < {floor:.2}")]
    OracleBelowFloor { accuracy: f64, floor: f64 },

    #[error("missing {what}: {path} does not exist")]
    MissingPrerequisite { what: String, path: PathBuf },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SaicError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}
