// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand extents do not fit the operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    /// A tensor in a weight or lens archive is missing, mis-shaped or truncated.
    #[error("archive {path}: tensor `{tensor}`: {detail}")]
    Tensor {
        path: PathBuf,
        tensor: String,
        detail: String,
    },

    #[error("archive {path}: {detail}")]
    Archive { path: PathBuf, detail: String },

    #[error("unsupported model: {0}")]
    Unsupported(String),

    #[error("context overflow: {len} tokens exceed the model's {max}-token context")]
    ContextOverflow { len: usize, max: usize },

    #[error("invalid hook point: {0}")]
    Hook(String),

    /// A cache lookup for an activation that was not requested.
    #[error("activation `{0}` was not captured")]
    NotCaptured(String),

    #[error("{path}:{line}: {detail}")]
    Record { path: PathBuf, line: usize, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
