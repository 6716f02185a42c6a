use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class {class} has {available} samples in the {domain} pool but {required} are required")]
    InsufficientSamples {
        class: usize,
        domain: &'static str,
        available: usize,
        required: usize,
    },

    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: expected {expected} features, found {found}")]
    DimensionMismatch {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: unknown domain tag {tag:?}")]
    UnknownDomain {
        path: PathBuf,
        line: usize,
        tag: String,
    },

    #[error("raw encoder output has zero norm")]
    ZeroNorm,

    #[error("classifier weight row {0} has zero norm")]
    ZeroPrototype(usize),

    #[error("support set must contain at least two classes")]
    DegenerateSupport,

    #[error("class {0} is missing from the {1} pool")]
    MissingClass(usize, &'static str),

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    #[error("pseudo-label store has no frozen predictions for sample index {0}")]
    MissingFrozenPrediction(usize),

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
}
