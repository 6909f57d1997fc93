use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use fpdsc_core::checkpoint;
use fpdsc_core::corpus::{
    build_deleted_value_probe, build_related_slot_probe, generate_corpus, load_corpus, save_corpus, save_dialogues,
    CorpusSpec, CorpusSplit, Dialogue,
};
use fpdsc_core::evaluation::{
    deleted_value_probe, evaluate, export_gate_traces, related_slot_probe, ConstantNone, GoldEcho, ModelTracker,
    ProbeKind, StateTracker,
};
use fpdsc_core::ontology::{DialogueState, Ontology};
use fpdsc_core::trainer::{Trainer, TrainingConfig};
use fpdsc_core::vocab::Vocabulary;
use fpdsc_core::{
    CheckpointError, CorpusError, DecodeMode, EvalError, EvalMode, Model, ModelConfig, ModelError, OntologyError,
    Preset, TrainError,
};
use serde::Serialize;

use crate::config::Settings;

pub const RUN_CONFIG_FILE: &str = "run_config.toml";

/// A command failure with its exit-code class.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config files or specs (exit 2).
    Config(anyhow::Error),
    /// I/O and training failures (exit 3).
    Runtime(anyhow::Error),
    /// Inputs that parse but are inconsistent: invalid corpora, mismatched or corrupt checkpoints (exit 4).
    Validation(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 3,
            Self::Validation(_) => 4,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Self::Config(e) | Self::Runtime(e) | Self::Validation(e) => e,
        }
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Spec(_) | CorpusError::Ontology(OntologyError::SpecTooSmall(_)) => Self::Config(e.into()),
            CorpusError::Io { .. } => Self::Runtime(e.into()),
            _ => Self::Validation(e.into()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => Self::Runtime(e.into()),
            _ => Self::Validation(e.into()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Self::Config(e.into()),
            _ => Self::Runtime(e.into()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::NoGates(_) => Self::Config(e.into()),
            EvalError::EmptyProbe(_) | EvalError::Coverage(_) => Self::Validation(e.into()),
            EvalError::Model(m) => m.into(),
            _ => Self::Runtime(e.into()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::Config(e.into()),
            TrainError::Overlap(_) | TrainError::EmptyCorpus => Self::Validation(e.into()),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Eval(v) => v.into(),
            _ => Self::Runtime(e.into()),
        }
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

pub fn run_dir(settings: &Settings, name: Option<&str>) -> PathBuf {
    let command = settings.command.as_deref().unwrap_or("run");
    let name = match name {
        Some(n) => n.to_string(),
        None => format!("{command}-{}", chrono::Local::now().format("%Y%m%d-%H%M%S%.3f")),
    };
    settings.out_root().join(name)
}

/// Creates the run directory and records the resolved settings before any work.
fn start(settings: &Settings, dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create run directory {}", dir.display()))
        .map_err(Failure::Runtime)?;
    let path = dir.join(RUN_CONFIG_FILE);
    fs::write(&path, settings.to_toml())
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::Runtime)?;
    println!("run directory: {}", dir.display());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::Runtime)
}

fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, Failure> {
    value
        .as_ref()
        .ok_or_else(|| Failure::Config(anyhow!("--{flag} is required (flag or config file)")))
}

fn corpus(settings: &Settings) -> Result<CorpusSplit, Failure> {
    Ok(load_corpus(require(&settings.corpus, "corpus")?)?)
}

fn split<'a>(corpus: &'a CorpusSplit, name: &str) -> Result<&'a [Dialogue], Failure> {
    match name {
        "train" => Ok(&corpus.train),
        "dev" => Ok(&corpus.dev),
        "test" => Ok(&corpus.test),
        other => Err(Failure::Config(anyhow!(
            "unknown split `{other}` (expected train, dev or test)"
        ))),
    }
}

fn load_model(settings: &Settings, ontology: Option<&Ontology>) -> Result<Model, Failure> {
    let ckpt = checkpoint::load(require(&settings.checkpoint, "checkpoint")?)?;
    Ok(match ontology {
        Some(o) => ckpt.model_for(o)?,
        None => ckpt.model()?,
    })
}

pub fn gen_corpus(settings: &Settings, dir: &Path) -> Result<(), Failure> {
    let spec = match &settings.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read spec {}", path.display()))
                .map_err(Failure::Config)?;
            toml::from_str::<CorpusSpec>(&text).map_err(|e| Failure::Config(anyhow!("spec {}: {e}", path.display())))?
        }
        None => CorpusSpec::default(),
    };
    start(settings, dir)?;
    let corpus = generate_corpus(&spec, settings.seed())?;
    save_corpus(dir, &corpus)?;
    println!(
        "wrote {} train, {} dev, {} test dialogues",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len()
    );
    Ok(())
}

fn training_config(settings: &Settings) -> TrainingConfig {
    let mut c = match settings.preset() {
        Preset::Paper => TrainingConfig::paper(),
        Preset::Desk => TrainingConfig::desk(),
    };
    c.seed = settings.seed();
    c.peak_lr = settings.lr.unwrap_or(c.peak_lr);
    c.epochs_budget = settings.epochs.unwrap_or(c.epochs_budget);
    c.patience_epochs = settings.patience.unwrap_or(c.patience_epochs);
    c.batch_size = settings.batch_size.unwrap_or(c.batch_size);
    c.sampling_prob = settings.sampling_prob.unwrap_or(c.sampling_prob);
    c.phases = settings.phase.unwrap_or(c.phases);
    c.decode = settings.decode();
    c.target_dev_accuracy = settings.target_dev_accuracy.or(c.target_dev_accuracy);
    c
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    variant: String,
    parameters: usize,
    best_dev_accuracy: f64,
    best_epoch: usize,
    best_phase: fpdsc_core::Phase,
    teacher_forcing_best: f64,
    epochs: usize,
}

pub fn train(settings: &Settings, dir: &Path, resume: bool) -> Result<(), Failure> {
    let corpus = corpus(settings)?;
    let config = training_config(settings);
    config.validate()?;
    let mut trainer = if resume {
        let ckpt = checkpoint::load(&dir.join("last.ckpt"))?;
        if ckpt.ontology != corpus.ontology {
            return Err(CheckpointError::OntologyMismatch.into());
        }
        fs::write(dir.join(RUN_CONFIG_FILE), settings.to_toml()).map_err(runtime)?;
        Trainer::resume(dir, config)?
    } else {
        start(settings, dir)?;
        let mut model_config = ModelConfig::preset(settings.preset(), settings.variant());
        model_config.seed = settings.seed();
        let vocab = Vocabulary::build(&corpus.ontology, &corpus.train);
        let model = Model::new(model_config, corpus.ontology.clone(), vocab)?;
        Trainer::new(model, config)?.with_output_dir(dir)
    };
    let outcome = trainer.train(&corpus.train, &corpus.dev)?;
    let summary = TrainSummary {
        variant: trainer.model.config.variant.name().to_string(),
        parameters: trainer.model.num_parameters(),
        best_dev_accuracy: outcome.best_dev_accuracy,
        best_epoch: outcome.best_epoch,
        best_phase: outcome.best_phase,
        teacher_forcing_best: outcome.teacher_forcing_best,
        epochs: trainer.state().epoch,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "best dev joint accuracy {:.4} at epoch {}",
        outcome.best_dev_accuracy, outcome.best_epoch
    );
    Ok(())
}

enum Tracker {
    Model(Model, DecodeMode),
    Gold(GoldEcho),
    None(ConstantNone),
}

impl Tracker {
    fn ontology<'a>(&'a self, fallback: Option<&'a Ontology>) -> Option<&'a Ontology> {
        match self {
            Self::Model(m, _) => Some(&m.ontology),
            Self::None(c) => Some(&c.0),
            Self::Gold(_) => fallback,
        }
    }
}

impl StateTracker for Tracker {
    fn track(&self, dialogue: &Dialogue, mode: EvalMode) -> Result<Vec<DialogueState>, ModelError> {
        match self {
            Self::Model(model, decode) => ModelTracker { model, decode: *decode }.track(dialogue, mode),
            Self::Gold(g) => g.track(dialogue, mode),
            Self::None(c) => c.track(dialogue, mode),
        }
    }

    fn name(&self) -> String {
        match self {
            Self::Model(m, _) => m.config.variant.name().to_string(),
            Self::Gold(g) => g.name(),
            Self::None(c) => c.name(),
        }
    }
}

fn tracker(settings: &Settings, oracle: Option<&str>, ontology: Option<&Ontology>) -> Result<Tracker, Failure> {
    match oracle {
        Some("gold-echo") => Ok(Tracker::Gold(GoldEcho)),
        Some(_) => {
            let o = match (ontology, &settings.checkpoint) {
                (Some(o), _) => o.clone(),
                (None, Some(_)) => load_model(settings, None)?.ontology,
                (None, None) => return Err(Failure::Config(anyhow!("--corpus or --checkpoint is required"))),
            };
            Ok(Tracker::None(ConstantNone(o)))
        }
        None => Ok(Tracker::Model(load_model(settings, ontology)?, settings.decode())),
    }
}

pub fn eval(settings: &Settings, dir: &Path, oracle: Option<&str>) -> Result<(), Failure> {
    let corpus = corpus(settings)?;
    let split_name = settings.split().to_string();
    let dialogues = split(&corpus, &split_name)?;
    let tracker = tracker(settings, oracle, Some(&corpus.ontology))?;
    start(settings, dir)?;
    let modes = match settings.mode {
        Some(m) => vec![m],
        None => vec![EvalMode::Normal, EvalMode::TeacherForcing],
    };
    let label = format!("{}:{split_name}", require(&settings.corpus, "corpus")?.display());
    for mode in modes {
        let report = evaluate(&tracker, &corpus.ontology, dialogues, mode, &label)?;
        let name = match mode {
            EvalMode::Normal => "eval_normal.json",
            EvalMode::TeacherForcing => "eval_teacher_forcing.json",
        };
        write_json(&dir.join(name), &report)?;
        println!("{}", serde_json::to_string(&report).map_err(runtime)?);
    }
    Ok(())
}

pub fn probe(settings: &Settings, dir: &Path, oracle: Option<&str>) -> Result<(), Failure> {
    let corpus_ontology = match &settings.corpus {
        Some(_) => Some(corpus(settings)?.ontology),
        None => None,
    };
    let tracker = tracker(settings, oracle, corpus_ontology.as_ref())?;
    let ontology = tracker
        .ontology(corpus_ontology.as_ref())
        .cloned()
        .ok_or_else(|| Failure::Config(anyhow!("--corpus is required with --oracle gold-echo")))?;
    let kind = *require(&settings.probe, "probe")?;
    let size = settings.probe_size.unwrap_or(50);
    start(settings, dir)?;
    let probe_set = match kind {
        ProbeKind::DeletedValue => build_deleted_value_probe(&ontology, size, 3, settings.seed())?,
        ProbeKind::RelatedSlot => build_related_slot_probe(&ontology, size, settings.seed())?,
    };
    save_dialogues(&dir.join(format!("probe_{}.jsonl", kind.as_str())), &probe_set)?;
    let report = match kind {
        ProbeKind::DeletedValue => deleted_value_probe(&tracker, &ontology, &probe_set)?,
        ProbeKind::RelatedSlot => related_slot_probe(&tracker, &ontology, &probe_set)?,
    };
    write_json(&dir.join(format!("probe_{}.json", kind.as_str())), &report)?;
    println!(
        "{}: {}/{} = {:.4}",
        kind.as_str(),
        report.successes,
        report.instances,
        report.success_change_rate
    );
    Ok(())
}

pub fn trace_gates(settings: &Settings, dir: &Path) -> Result<(), Failure> {
    let corpus = corpus(settings)?;
    let model = load_model(settings, Some(&corpus.ontology))?;
    let all = split(&corpus, settings.split())?;
    let chosen: Vec<Dialogue> = match &settings.dialogues {
        Some(ids) => {
            ids.iter()
                .map(|id| {
                    all.iter().find(|d| &d.id == id).cloned().ok_or_else(|| {
                        Failure::Validation(anyhow!("dialogue `{id}` not in split {}", settings.split()))
                    })
                })
                .collect::<Result<_, _>>()?
        }
        None => all.to_vec(),
    };
    start(settings, dir)?;
    let path = dir.join("gate_traces.csv");
    let rows = export_gate_traces(&model, &chosen, settings.decode(), &path)?;
    println!("wrote {rows} gate records to {}", path.display());
    Ok(())
}
