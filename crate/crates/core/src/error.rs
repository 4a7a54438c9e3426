use thiserror::Error;

/// Errors surfaced by the audit pipeline.
#[derive(Debug, Error)]
pub enum AuditError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid record {id}: {reason}")]
    Record { id: String, reason: String },

    #[error("label {value} outside scale [{min}, {max}]")]
    LabelOutOfScale { value: i64, min: u8, max: u8 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("prediction error for {id}: {reason}")]
    Prediction { id: String, reason: String },

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("index set mismatch: {0}")]
    IndexSetMismatch(String),

    #[error("service error: {0}")]
    Service(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AuditError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        AuditError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn record(id: impl Into<String>, reason: impl Into<String>) -> Self {
        AuditError::Record {
            id: id.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = AuditError> = std::result::Result<T, E>;
