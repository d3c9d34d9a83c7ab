use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {field}: {msg}")]
    Config { field: String, msg: String },

    #[error("unknown configuration key `{key}`; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },

    #[error("insufficient supports for Gaussian head: got {got}, need at least {need}")]
    InsufficientSupports { got: usize, need: usize },

    #[error("class `{class}` has {have} examples, episode needs at least {need}")]
    ClassTooSmall {
        class: String,
        have: usize,
        need: usize,
    },

    #[error("non-finite gradient in parameter `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: u64 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: cannot decode image: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("dataset `{name}`: {msg}")]
    Dataset { name: String, msg: String },

    #[error("geometry mismatch: model expects {expected:?}, dataset has {found:?}")]
    Geometry {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },

    #[error("benchmark: {0}")]
    Bench(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    /// True for errors caused by the user's configuration rather than by a
    /// failure during the run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::UnknownKey { .. } | Error::InsufficientSupports { .. }
        )
    }
}
