use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {field}: expected {expected}, found {found}")]
    DimensionMismatch {
        field: String,
        expected: usize,
        found: usize,
    },

    #[error("non-positive noise variance at index {index}: {value}")]
    NonPositiveNoiseVariance { index: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{0} is numerically singular")]
    Singular(&'static str),

    #[error("{what} is not symmetric (asymmetry {asymmetry:e})")]
    Asymmetric { what: &'static str, asymmetry: f64 },

    #[error("analytic DCF has no interior minimum; degenerate stats ({0})")]
    NoInteriorMinimum(String),

    #[error("indistinguishable hypotheses: equal target and non-target score distributions")]
    IndistinguishableHypotheses,

    #[error("normalization scale undefined: target and non-target variances are both zero")]
    ZeroTotalVariance,

    #[error("cannot length-normalize a zero vector")]
    ZeroVector,

    #[error("sample covariance is rank deficient (min eigenvalue {min_eigenvalue:e}); enable the ridge option")]
    RankDeficient { min_eigenvalue: f64 },

    #[error("{0} must be non-empty")]
    Empty(&'static str),

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("speaker {speaker} has {available} vectors, needs {required}")]
    InsufficientVectors {
        speaker: String,
        available: usize,
        required: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn mismatch(field: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            field: field.into(),
            expected,
            found,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
