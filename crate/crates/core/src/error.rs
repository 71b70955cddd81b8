use thiserror::Error;

/// Errors raised anywhere in the calibration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integration diverged at t = {time}: {reason}")]
    Divergence { time: f64, reason: String },

    #[error("degenerate expected value {value} at index {index}")]
    DegenerateExpected { index: usize, value: f64 },

    #[error("objective is not finite at the start point and every initial vertex")]
    Unfittable,

    #[error("insufficient ensemble: {accepted} accepted fits (need at least 2)")]
    InsufficientEnsemble { accepted: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at row {row}, field `{field}`: {message}")]
    Parse {
        row: usize,
        field: String,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(row: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            row,
            field: field.into(),
            message: message.into(),
        }
    }
}
