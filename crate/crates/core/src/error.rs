use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    ParamDomain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite input: {0}")]
    InputDomain(String),

    #[error("size guard exceeded: {0}")]
    Size(String),

    /// The operator returned the zero vector; the model is locally constant.
    #[error("rank-zero operator at iteration {iteration}")]
    RankZero { iteration: usize },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("non-finite gradient at record {record}")]
    NonFiniteGradient { record: usize },

    #[error("psychometric data does not bracket the criterion: {0}")]
    NotBracketed(String),

    #[error("infinite threshold: {0}")]
    InfiniteThreshold(String),

    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("manifest {path} row {row}: {msg}")]
    Manifest {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("did not converge: {0}")]
    NotConverged(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category, used for `error:<category>:` prefixes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ParamDomain(_) => "param",
            Error::Shape(_) => "shape",
            Error::InputDomain(_) => "input",
            Error::Size(_) => "size",
            Error::RankZero { .. } => "rank-zero",
            Error::UndefinedCorrelation(_) => "correlation",
            Error::NonFiniteGradient { .. } => "gradient",
            Error::NotBracketed(_) => "bracket",
            Error::InfiniteThreshold(_) => "infinite-threshold",
            Error::Parse { .. } => "parse",
            Error::Manifest { .. } => "manifest",
            Error::NotConverged(_) => "convergence",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
