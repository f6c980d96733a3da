//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QmapError {
    /// Malformed input text (scheme files, config files).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A value outside its mathematical domain (negative b, |coord| > 1, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Mismatched tensor/vector shapes or channel layouts.
    #[error("shape error: {0}")]
    Shape(String),

    /// Inconsistent or invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Numerical failure: singular systems, non-finite losses, rank-deficient fits.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed binary containers or missing sidecars.
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl QmapError {
    /// CLI exit code: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            QmapError::Config(_) => 1,
            QmapError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, QmapError>;
