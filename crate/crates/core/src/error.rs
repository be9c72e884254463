use std::path::PathBuf;

use thiserror::Error;

/// Coarse error class, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Model,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },
    #[error("inconsistent volume: {0}")]
    Inconsistent(String),
    #[error("slice ordering: {0}")]
    Ordering(String),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("refusing to overwrite existing {0}")]
    Exists(PathBuf),
    #[error("data: {0}")]
    Data(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("center ({x}, {y}) is not aligned to the stride lattice")]
    Alignment { x: usize, y: usize },
    #[error("duplicate center ({x}, {y})")]
    Duplicate { x: usize, y: usize },
    #[error("cell ({gx}, {gy}) outside {size}x{size} grid")]
    Bounds { gx: usize, gy: usize, size: usize },
    #[error("corrupt model: {0}")]
    Corruption(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("insufficient data: need {needed} slices, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("model: {0}")]
    Model(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Model(_) | Error::Corruption(_) | Error::Divergence { .. } => ErrorKind::Model,
            Error::Io { .. } | Error::Exists(_) => ErrorKind::Io,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
