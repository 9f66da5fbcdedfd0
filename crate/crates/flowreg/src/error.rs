use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the flowreg library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point set")]
    EmptyPointSet,

    #[error("non-finite input in {0}")]
    NonFinite(&'static str),

    #[error("length mismatch in {context}: {left} vs {right}")]
    LengthMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("degenerate neighborhood: {0}")]
    DegenerateNeighborhood(String),

    #[error("non-orthonormal rotation")]
    NonOrthonormalRotation,

    #[error("degenerate scene spec: {0}")]
    DegenerateSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at iteration {iteration} (dist={dist}, surf={surf}, cyc={cyc})")]
    NonFiniteLoss {
        iteration: usize,
        dist: f64,
        surf: f64,
        cyc: f64,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: unknown config key `{key}`")]
    UnknownConfigKey {
        path: PathBuf,
        line: usize,
        key: String,
    },

    #[error("failed to {context} {path}: {source}")]
    Io {
        context: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("report serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
