use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("projection failed: {0}")]
    Projection(String),

    #[error("root search did not converge after {iterations} iterations")]
    Convergence { iterations: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{path}: missing mandatory key `{key}`")]
    MissingKey { path: String, key: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("insufficient tie points: {found} matches survived, at least {required} required")]
    InsufficientTiePoints { found: usize, required: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("insufficient overlap: {0}")]
    InsufficientOverlap(String),

    #[error("degenerate reference: {0}")]
    DegenerateReference(String),

    #[error("extent error: {0}")]
    Extent(String),

    #[error("insufficient features: {0}")]
    InsufficientFeatures(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for the failures that mean "not enough data to proceed" rather
    /// than a malformed input or a numerical breakdown.
    pub fn is_insufficient_data(&self) -> bool {
        matches!(
            self,
            Error::InsufficientTiePoints { .. }
                | Error::InsufficientOverlap(_)
                | Error::InsufficientFeatures(_)
                | Error::EmptyInput(_)
        )
    }
}
