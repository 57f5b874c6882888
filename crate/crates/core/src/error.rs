use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("gradient tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("{}: expected {expected} bytes, found {found}", path.display())]
    FrameSize {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error(
        "exact non-local stage over {pixels} pixels needs {required_bytes} bytes for the dense \
         similarity (limit is {limit_pixels} pixels without override)"
    )]
    MemoryGuard {
        pixels: usize,
        required_bytes: u128,
        limit_pixels: usize,
    },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
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
