use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::data::SplitParseError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("model config: {0}")]
    ModelConfig(String),

    #[error("bad magic in {path}")]
    BadMagic { path: PathBuf },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error(
        "shape mismatch for tensor `{name}`: checkpoint has {found:?}, model expects {expected:?}"
    )]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    SplitParse(#[from] SplitParseError),

    #[error("unknown split `{0}`")]
    UnknownSplit(String),

    #[error("idx format: {0}")]
    Idx(String),

    #[error("unexpected EOF while reading {0}")]
    UnexpectedEof(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("matrix has eigenvalue {0:e} below the damping floor")]
    NegativeEigenvalue(f64),

    #[error("step {step} exceeds schedule length {total}")]
    ScheduleOverrun { step: usize, total: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("numeric divergence at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 divergence, 4 IO, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Json(_)
            | Error::ModelConfig(_)
            | Error::SplitParse(_)
            | Error::UnknownSplit(_)
            | Error::InvalidArgument(_) => 2,
            Error::Divergence { .. } | Error::NonFinite(_) => 3,
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated(_)
            | Error::Manifest(_)
            | Error::Idx(_)
            | Error::UnexpectedEof(_) => 4,
            _ => 1,
        }
    }
}
