use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("index out of range in {op}: position {position} holds {value}, bound is {bound}")]
    Index {
        op: &'static str,
        position: usize,
        value: usize,
        bound: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("cannot allocate {bytes} bytes for {what}")]
    Resource { what: &'static str, bytes: usize },

    #[error("corpus error at {}: {source}", path.display())]
    Corpus {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged: non-finite loss at update {update}")]
    Divergence { update: usize },

    #[error("inconsistent profile: {0}")]
    Inconsistency(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension {
            op,
            left: format!("{}x{}", left.0, left.1),
            right: format!("{}x{}", right.0, right.1),
        }
    }
}
