use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("pixel ({row}, {col}) outside {height}x{width} canvas")]
    OutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("denoiser timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("denoiser failed at patch {patch}, timestep {timestep}: {source}")]
    Denoise {
        patch: usize,
        timestep: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("coverage gap: {0}")]
    Coverage(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Display, actual: impl std::fmt::Display) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Attach patch and timestep context to a denoiser failure.
    pub fn at_patch(self, patch: usize, timestep: usize) -> Self {
        match self {
            e @ Error::Denoise { .. } => e,
            other => Error::Denoise {
                patch,
                timestep,
                source: Box::new(other),
            },
        }
    }
}
