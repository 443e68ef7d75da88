use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence of length {len} does not fit context of {context}")]
    SequenceTooLong { len: usize, context: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("neuron ({layer}, {index}) outside model with {layers} layers and d_ff={d_ff}")]
    NeuronOutOfRange {
        layer: usize,
        index: usize,
        layers: usize,
        d_ff: usize,
    },

    #[error("duplicate intervention for neuron ({layer}, {index})")]
    DuplicateNeuron { layer: usize, index: usize },

    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown language code `{0}`")]
    UnknownLanguage(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },

    #[error("stale artifact {path}: expected hash {expected}, found {found}")]
    StaleArtifact {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
