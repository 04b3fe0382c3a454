use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("pool invariant violated: {0}")]
    Invariant(String),

    #[error("unsupported architecture: {0}")]
    Unsupported(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("annotation error: {0}")]
    Annotation(String),

    /// The annotation source did not deliver a complete batch in time; the
    /// run was checkpointed to `checkpoint` and can be resumed from there.
    #[error("annotator timed out; run suspended (checkpoint: {checkpoint:?})")]
    Suspended { checkpoint: Option<PathBuf> },

    #[error("malformed mask encoding: {0}")]
    Rle(String),

    #[error("i/o error at {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path:?}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
