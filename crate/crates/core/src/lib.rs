//! Dialogue state tracking by fusing predicted previous states with conversation context.
//!
//! The crate covers the whole pipeline: synthetic corpora, encoders, the fusion network and
//! its variants, training objectives, the two-phase trainer, checkpoints and evaluation probes.

pub mod checkpoint;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod ontology;
pub mod optim;
pub mod trainer;
pub mod vocab;

pub use error::{CheckpointError, CorpusError, EvalError, ModelError, OntologyError, TrainError};
pub use fusion::{GateName, GateOverride, ModelVariant};
pub use model::{EvalMode, Model, ModelConfig, Preset};
pub use objectives::DecodeMode;
pub use trainer::{Phase, PhasePlan, Trainer, TrainingConfig};
