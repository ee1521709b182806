use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed NIfTI-1 data: {0}")]
    Format(String),
    #[error("expected a 3-D volume, found {0} dimensions")]
    Dimensionality(usize),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot pair volumes: {0}")]
    Pairing(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("cannot split dataset: {0}")]
    Split(String),
    #[error("parameter sets are not congruent: {0}")]
    Congruence(String),
    #[error("cannot assemble volume: {0}")]
    Assembly(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (batch {batch}): {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        batch: String,
        detail: String,
    },
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error("evaluation failed for {subject}: {reason}")]
    Evaluation { subject: String, reason: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
