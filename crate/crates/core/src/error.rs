use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the denoising toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Per-point normal estimation failed for the listed indices.
    #[error("degenerate neighborhoods at {} point(s): {:?}", indices.len(), indices)]
    DegenerateNormals { indices: Vec<usize> },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error(
        "triangle sampling exhausted after {attempts} attempts: accepted {accepted} of {requested} \
         (acceptance rate {rate:.3e})"
    )]
    SamplingExhausted {
        attempts: usize,
        accepted: usize,
        requested: usize,
        rate: f64,
    },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("patch coverage incomplete: {uncovered} point(s) uncovered after {seeds} seeds")]
    Coverage { uncovered: usize, seeds: usize },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end:
    /// 2 invalid arguments, 3 data errors, 4 training divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 2,
            Error::Divergence(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
