use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("layer `{layer}`: {message}")]
    Schema { layer: String, message: String },

    #[error("layer `{layer}`: shape mismatch: {message}")]
    ShapeMismatch { layer: String, message: String },

    #[error("blob length mismatch for `{blob}`: expected {expected} values, found {actual}")]
    BlobLength {
        blob: String,
        expected: usize,
        actual: usize,
    },

    #[error("layer `{layer}` references missing blob `{blob}`")]
    DanglingRef { layer: String, blob: String },

    #[error("cycle detected at layer `{layer}`")]
    Cycle { layer: String },

    #[error("malformed {what} file: {message}")]
    Format { what: &'static str, message: String },

    #[error("unknown template `{0}`")]
    UnknownTemplate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("graph has no edges; frustration is undefined")]
    EmptyGraph,

    #[error("graph has {n} nodes, above the brute-force cap of {cap}")]
    TooLarge { n: usize, cap: usize },

    #[error("graph has no provenance for edge {edge}")]
    MissingProvenance { edge: usize },

    #[error("non-finite value produced by layer `{layer}`")]
    NonFinite { layer: String },

    #[error("no kink-free input found after {attempts} resamples")]
    NoKinkFreePoint { attempts: usize },

    #[error("{count} Jacobian entries disagree with the graph signs")]
    SignViolations { count: usize },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(layer: &str, message: impl Into<String>) -> Self {
        Error::Schema {
            layer: layer.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(layer: &str, message: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            layer: layer.to_string(),
            message: message.into(),
        }
    }

    /// True for errors caused by invalid inputs rather than numerical trouble.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_validation(),
            Error::Io { .. }
            | Error::Json(_)
            | Error::Schema { .. }
            | Error::ShapeMismatch { .. }
            | Error::BlobLength { .. }
            | Error::DanglingRef { .. }
            | Error::Cycle { .. }
            | Error::Format { .. }
            | Error::UnknownTemplate(_)
            | Error::InvalidArgument(_)
            | Error::TooLarge { .. }
            | Error::MissingProvenance { .. } => true,
            Error::EmptyGraph
            | Error::NonFinite { .. }
            | Error::NoKinkFreePoint { .. }
            | Error::SignViolations { .. }
            | Error::DegenerateVariance(_) => false,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Format {
            what: "csv",
            message: err.to_string(),
        }
    }
}
