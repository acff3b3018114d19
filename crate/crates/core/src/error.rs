use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate graph: adjacency density is {0}, balanced cross-entropy needs 0 < d < 1")]
    DegenerateGraph(f64),

    #[error("non-finite loss at epoch {epoch} (component {component})")]
    NonFiniteLoss { epoch: usize, component: &'static str },

    #[error("requested {requested} non-edges but only {available} exist")]
    NotEnoughNonEdges { requested: usize, available: usize },

    #[error("{0}")]
    Metric(&'static str),

    #[error("class {0} has no training examples")]
    ClassAbsent(usize),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("missing forward intermediates: {0}")]
    MissingIntermediates(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
