use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("state error: {0}")]
    State(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{file}: bad magic {found:02x?}")]
    BadMagic { file: &'static str, found: Vec<u8> },

    #[error("checkpoint architecture digest {found:016x} does not match model digest {expected:016x}")]
    DigestMismatch { expected: u64, found: u64 },

    #[error("truncated while reading {section}")]
    Truncated { section: &'static str },

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("diverged at step {step}: |x|={x:e}, |y|={y:e}")]
    Divergence { step: usize, x: f64, y: f64 },

    #[error("non-finite loss at iteration {iteration}; last metrics: {last_row}")]
    NonFiniteLoss { iteration: usize, last_row: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
