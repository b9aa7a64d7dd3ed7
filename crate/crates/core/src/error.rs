use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the grounding library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid image dimensions: {0}")]
    InvalidDims(String),

    #[error("length mismatch: {left} predictions vs {right} ground truths")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid record `{id}`: {reason}")]
    Record { id: String, reason: String },

    #[error("manifest line {line}: {reason}")]
    ManifestParse { line: usize, reason: String },

    #[error("unknown code `{code}` for {field}")]
    UnknownCode { field: &'static str, code: String },

    #[error("prompt is missing binding `{0}`")]
    MissingBinding(&'static str),

    #[error("cannot parse {kind} response {raw:?}: {reason}")]
    Parse {
        kind: &'static str,
        raw: String,
        reason: String,
    },

    #[error("annotation client: {0}")]
    Client(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("unknown report format `{0}` (expected markdown, csv or json)")]
    UnknownFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
