use std::path::PathBuf;

use fpdsc_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OntologyError {
    #[error("unknown slot `{0}`")]
    UnknownSlot(String),
    #[error("value `{value}` is not a candidate of slot `{slot}`")]
    UnknownValue { slot: String, value: String },
    #[error("state is missing slot `{0}`")]
    MissingSlot(String),
    #[error("ontology spec too small: {0}")]
    SpecTooSmall(String),
    #[error("invalid ontology: {0}")]
    Invalid(String),
    #[error("unsupported ontology schema version {0}")]
    SchemaVersion(u32),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: malformed dialogue: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("dialogue `{id}` failed validation: {message}")]
    Invalid { id: String, message: String },
    #[error("corpus spec: {0}")]
    Spec(String),
    #[error("dialogue ids overlap between splits: {0}")]
    OverlappingSplits(String),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error("input error: {0}")]
    Input(String),
    #[error("{states} previous states supplied for {turns} turns")]
    StateCount { states: usize, turns: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint ontology does not match the corpus ontology")]
    OntologyMismatch,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss in dialogue `{dialogue}` at turn {turn}: {source}")]
    NonFinite {
        dialogue: String,
        turn: usize,
        #[source]
        source: TensorError,
    },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("dev and train splits share dialogue `{0}`")]
    Overlap(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("metrics log {path}: {source}")]
    Log {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions missing for: {0:?}")]
    Coverage(Vec<String>),
    #[error("probe set has no {0} instances")]
    EmptyProbe(&'static str),
    #[error("no fusion gates in variant {0}")]
    NoGates(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
