//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {msg}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate id {id:?}")]
    DuplicateId { id: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of vocabulary (size {vocab})")]
    OutOfVocab { id: u32, vocab: usize },

    #[error("scored position {position} out of range for sequence of {len} tokens")]
    BadPosition { position: usize, len: usize },

    #[error("no scored positions")]
    NoScoredPositions,

    #[error("empty sample")]
    EmptySample,

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("matrix not symmetric: max asymmetry {found:.3e} exceeds tolerance {tol:.3e}")]
    NotSymmetric { tol: f64, found: f64 },

    #[error("singular curvature: damping is zero and {count} rescaled eigenvalues are zero")]
    SingularCurvature { count: usize },

    #[error("dense parameter count {count} exceeds oracle limit {limit}")]
    ParamBudget { count: usize, limit: usize },

    #[error("too few samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("{path}: bad artifact: {msg}")]
    Artifact { path: PathBuf, msg: String },

    #[error("missing input: {path}")]
    MissingInput { path: PathBuf },

    #[error("unknown export kind {kind:?}")]
    UnknownKind { kind: String },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn artifact(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Artifact {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for failures of the numerics rather than of usage or inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::SingularCurvature { .. } | Error::NotSymmetric { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
