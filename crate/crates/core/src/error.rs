use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("scene placement infeasible: placed {placed} of {requested} buildings after {attempts} attempts")]
    Placement { placed: usize, requested: usize, attempts: usize },

    #[error("refusing to overwrite existing manifest at {0} (use force)")]
    ManifestExists(PathBuf),

    #[error("coordinate frame mismatch: {0}")]
    FrameMismatch(String),

    #[error("model spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("settings violation: {0}")]
    Settings(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize, record: Box<crate::trainers::RunRecord> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
