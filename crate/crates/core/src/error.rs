use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {detail}")]
    Shape { node: usize, detail: String },

    #[error("invalid array: {0}")]
    InvalidArray(String),

    #[error("unbound name `{0}`")]
    Unbound(String),

    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("non-finite value produced at node {node}")]
    NonFinite { node: usize },

    #[error("unknown op `{0}`")]
    UnknownOp(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("vocabulary mismatch: sequence built against {found:#x}, expected {expected:#x}")]
    VocabularyMismatch { expected: u64, found: u64 },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("incompatible checkpoint, mismatched parameters: {}", .0.join(", "))]
    IncompatibleCheckpoint(Vec<String>),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn csv(context: impl Into<String>, source: csv::Error) -> Self {
        Error::Csv {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configs, files) rather than
    /// failures during a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::Dataset(_)
                | Error::IncompatibleCheckpoint(_)
                | Error::InvalidArgument(_)
                | Error::Io { .. }
                | Error::Json { .. }
                | Error::Csv { .. }
        )
    }
}
