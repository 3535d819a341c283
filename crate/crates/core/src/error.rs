use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("numeric fault in {op}: non-finite value produced")]
    NumericFault { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("unknown stage `{0}`")]
    UnknownStage(String),

    #[error("parse error in {path} at byte offset {offset}: {reason}")]
    Parse {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("degenerate plane: {0}")]
    DegeneratePlane(String),

    #[error("training aborted at epoch {epoch}: {source}")]
    TrainingFault {
        epoch: usize,
        #[source]
        source: Box<Error>,
        /// Weights at the end of the last epoch that finished cleanly.
        last_good: Option<Box<crate::nn::WeightVector>>,
    },

    #[error("interrupted")]
    Interrupted,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path);
        }
        Error::Io { path, source }
    }

    /// True when the error (or the fault wrapped by a training abort) is numeric.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NumericFault { .. } => true,
            Error::TrainingFault { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
