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

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}:{line}: annotation references unknown annotator `{annotator_id}`")]
    UnknownAnnotator {
        path: PathBuf,
        line: u64,
        annotator_id: String,
    },

    #[error("{path}:{line}: duplicate annotation of text `{text_id}` by annotator `{annotator_id}`")]
    DuplicateAnnotation {
        path: PathBuf,
        line: u64,
        text_id: String,
        annotator_id: String,
    },

    #[error("label `{0}` is not part of the label space")]
    UnknownLabel(String),

    #[error("text `{text_id}`: {reason}")]
    InvalidProbabilities { text_id: String, reason: String },

    #[error("predictions missing for {} text(s): {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),

    #[error("{what} = {value} is outside [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unknown metric `{name}`; valid metrics: {}", .valid.join(", "))]
    UnknownMetric { name: String, valid: Vec<String> },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data or configuration rather than
    /// the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}
