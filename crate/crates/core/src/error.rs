use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },

    #[error("layer {layer}: non-finite value encountered")]
    NonFinite { layer: usize },

    #[error("invalid network: {0}")]
    Network(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown {what} `{name}`")]
    Unknown { what: &'static str, name: String },

    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite:?})")]
    Diverged {
        epoch: usize,
        last_finite: Option<usize>,
    },

    #[error("oracle candidate space too large: {count} assignments (limit {limit})")]
    CandidateExplosion { count: u128, limit: u128 },

    #[error("requantization ratio {0} cannot be represented")]
    Requant(f64),

    #[error("integer accumulator overflow")]
    Overflow,

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed manifest: {msg}")]
    Manifest { path: PathBuf, msg: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
