use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum PoetError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{op} did not converge after {iterations} sweeps (residual {residual:e})")]
    NonConvergence {
        op: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("singular system in {0}")]
    Singular(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("forward cache does not belong to this layer state ({0})")]
    CacheMismatch(String),

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl PoetError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        PoetError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: io::Error) -> Self {
        PoetError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = PoetError> = std::result::Result<T, E>;
