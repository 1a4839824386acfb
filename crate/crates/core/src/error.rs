use std::path::PathBuf;

use thiserror::Error;

use crate::data::CategoryId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown category {0}")]
    UnknownCategory(CategoryId),
    #[error("category {0} is not a known (labeled) class")]
    UnknownClass(CategoryId),
    #[error("known class {0} has no labeled samples")]
    EmptyClass(CategoryId),
    #[error("label of sample {0} is hidden from training code")]
    LabelHidden(usize),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("projection output has degenerate norm {0:e}")]
    DegenerateNorm(f32),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("invalid search range [{min}, {max}]")]
    RangeInvalid { min: usize, max: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("missing prediction for sample {0}")]
    MissingPrediction(usize),
    #[error("training diverged at step {0}: parameters are no longer finite")]
    Diverged(u64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty component")]
    EmptyComponent,
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than the filesystem.
    pub fn is_config_error(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}
