//! Joint accuracy, probe protocols and gate-trace export.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::error::{EvalError, ModelError};
use crate::fusion::GateName;
use crate::model::{EvalMode, Model};
use crate::objectives::DecodeMode;
use crate::ontology::{canonical, DialogueState, Ontology, NONE};

/// Anything that produces a state per turn.
pub trait StateTracker {
    fn track(&self, dialogue: &Dialogue, mode: EvalMode) -> Result<Vec<DialogueState>, ModelError>;

    fn name(&self) -> String;
}

/// A trained model with a decoding rule.
#[derive(Debug, Clone, Copy)]
pub struct ModelTracker<'a> {
    pub model: &'a Model,
    pub decode: DecodeMode,
}

impl StateTracker for ModelTracker<'_> {
    fn track(&self, dialogue: &Dialogue, mode: EvalMode) -> Result<Vec<DialogueState>, ModelError> {
        self.model.predict(dialogue, mode, self.decode)
    }

    fn name(&self) -> String {
        self.model.config.variant.name().to_string()
    }
}

impl StateTracker for Model {
    fn track(&self, dialogue: &Dialogue, mode: EvalMode) -> Result<Vec<DialogueState>, ModelError> {
        self.predict(dialogue, mode, DecodeMode::Argmax)
    }

    fn name(&self) -> String {
        self.config.variant.name().to_string()
    }
}

/// Returns the gold states.
#[derive(Debug, Clone, Copy, Default)]
pub struct GoldEcho;

impl StateTracker for GoldEcho {
    fn track(&self, dialogue: &Dialogue, _mode: EvalMode) -> Result<Vec<DialogueState>, ModelError> {
        Ok(dialogue.turns.iter().map(|t| t.state.clone()).collect())
    }

    fn name(&self) -> String {
        "gold_echo".into()
    }
}

/// Predicts `none` for every slot.
#[derive(Debug, Clone)]
pub struct ConstantNone(pub Ontology);

impl StateTracker for ConstantNone {
    fn track(&self, dialogue: &Dialogue, _mode: EvalMode) -> Result<Vec<DialogueState>, ModelError> {
        Ok(vec![self.0.empty_state(); dialogue.turns.len()])
    }

    fn name(&self) -> String {
        "constant_none".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub joint_accuracy: f64,
    pub slot_accuracy: BTreeMap<String, f64>,
    pub mode: EvalMode,
    pub corpus: String,
    pub variant: String,
    pub turns: usize,
}

/// Predicted states keyed by dialogue id.
pub type Predictions = BTreeMap<String, Vec<DialogueState>>;

fn values_equal(a: &str, b: &str) -> bool {
    canonical(a) == canonical(b)
}

/// Exact-match accuracy over all turns of `gold`.
pub fn joint_accuracy(
    ontology: &Ontology,
    predictions: &Predictions,
    gold: &[Dialogue],
    mode: EvalMode,
    corpus: &str,
    variant: &str,
) -> Result<EvalReport, EvalError> {
    let mut missing = Vec::new();
    for d in gold {
        let have = predictions.get(&d.id).map_or(0, Vec::len);
        missing.extend((have..d.turns.len()).map(|t| format!("{}#{}", d.id, t + 1)));
    }
    if !missing.is_empty() {
        return Err(EvalError::Coverage(missing));
    }
    let mut turns = 0usize;
    let mut joint = 0usize;
    let mut per_slot: BTreeMap<&str, usize> = ontology.slots.iter().map(|s| (s.as_str(), 0)).collect();
    for d in gold {
        for (turn, pred) in d.turns.iter().zip(&predictions[&d.id]) {
            turns += 1;
            let mut all = true;
            for slot in &ontology.slots {
                if values_equal(pred.value(slot), turn.state.value(slot)) {
                    *per_slot.get_mut(slot.as_str()).expect("slot present") += 1;
                } else {
                    all = false;
                }
            }
            joint += usize::from(all);
        }
    }
    let frac = |n: usize| if turns == 0 { 0.0 } else { n as f64 / turns as f64 };
    Ok(EvalReport {
        joint_accuracy: frac(joint),
        slot_accuracy: per_slot.into_iter().map(|(s, n)| (s.to_string(), frac(n))).collect(),
        mode,
        corpus: corpus.to_string(),
        variant: variant.to_string(),
        turns,
    })
}

pub fn predict_all<T: StateTracker + ?Sized>(
    tracker: &T,
    dialogues: &[Dialogue],
    mode: EvalMode,
) -> Result<Predictions, EvalError> {
    dialogues
        .iter()
        .map(|d| Ok((d.id.clone(), tracker.track(d, mode)?)))
        .collect()
}

pub fn evaluate<T: StateTracker + ?Sized>(
    tracker: &T,
    ontology: &Ontology,
    dialogues: &[Dialogue],
    mode: EvalMode,
    corpus: &str,
) -> Result<EvalReport, EvalError> {
    let predictions = predict_all(tracker, dialogues, mode)?;
    joint_accuracy(ontology, &predictions, dialogues, mode, corpus, &tracker.name())
}

/// Joint accuracy of `model` on `dialogues`.
pub fn joint_accuracy_of(
    model: &Model,
    dialogues: &[Dialogue],
    mode: EvalMode,
    decode: DecodeMode,
) -> Result<f64, EvalError> {
    let tracker = ModelTracker { model, decode };
    Ok(evaluate(&tracker, &model.ontology, dialogues, mode, "")?.joint_accuracy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    DeletedValue,
    RelatedSlot,
}

impl std::str::FromStr for ProbeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "deleted_value" => Ok(Self::DeletedValue),
            "related_slot" => Ok(Self::RelatedSlot),
            _ => Err(format!("unknown probe `{s}` (expected deleted-value or related-slot)")),
        }
    }
}

impl ProbeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::DeletedValue => "deleted_value",
            Self::RelatedSlot => "related_slot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeInstance {
    pub dialogue_id: String,
    /// 1-based.
    pub turn: usize,
    pub slot: String,
    pub predicted: String,
    pub expected: String,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: ProbeKind,
    pub instances: usize,
    pub successes: usize,
    pub success_change_rate: f64,
    pub log: Vec<ProbeInstance>,
}

impl ProbeReport {
    fn from_log(probe: ProbeKind, log: Vec<ProbeInstance>) -> Result<Self, EvalError> {
        if log.is_empty() {
            return Err(EvalError::EmptyProbe(probe.as_str()));
        }
        let successes = log.iter().filter(|i| i.success).count();
        Ok(Self {
            probe,
            instances: log.len(),
            successes,
            success_change_rate: successes as f64 / log.len() as f64,
            log,
        })
    }
}

/// Counts every deletion turn; a success needs a non-`none` prediction for the slot on the turn
/// before and `none` on the deletion turn. Predictions use normal evaluation.
pub fn deleted_value_probe<T: StateTracker + ?Sized>(
    tracker: &T,
    ontology: &Ontology,
    probe_set: &[Dialogue],
) -> Result<ProbeReport, EvalError> {
    let mut log = Vec::new();
    for d in probe_set {
        let events = d.deletion_events(ontology);
        if events.is_empty() {
            continue;
        }
        let pred = tracker.track(d, EvalMode::Normal)?;
        for e in events {
            let before = pred[e.turn - 1].value(&e.slot);
            let now = pred[e.turn].value(&e.slot);
            let success = !values_equal(before, NONE) && values_equal(now, NONE);
            log.push(ProbeInstance {
                dialogue_id: d.id.clone(),
                turn: e.turn + 1,
                slot: e.slot,
                predicted: format!("{before} -> {now}"),
                expected: format!("{} -> {NONE}", e.deleted),
                success,
            });
        }
    }
    ProbeReport::from_log(ProbeKind::DeletedValue, log)
}

/// Counts linked slots that receive a carried-over non-`none` value; a success is an exact match.
pub fn related_slot_probe<T: StateTracker + ?Sized>(
    tracker: &T,
    ontology: &Ontology,
    probe_set: &[Dialogue],
) -> Result<ProbeReport, EvalError> {
    let mut log = Vec::new();
    for d in probe_set {
        let events: Vec<_> = d
            .related_events(ontology)
            .into_iter()
            .filter(|e| !values_equal(&e.value, NONE))
            .collect();
        if events.is_empty() {
            continue;
        }
        let pred = tracker.track(d, EvalMode::Normal)?;
        for e in events {
            let got = pred[e.turn].value(&e.target);
            log.push(ProbeInstance {
                dialogue_id: d.id.clone(),
                turn: e.turn + 1,
                slot: e.target,
                predicted: got.to_string(),
                expected: e.value.clone(),
                success: values_equal(got, &e.value),
            });
        }
    }
    ProbeReport::from_log(ProbeKind::RelatedSlot, log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub dialogue_id: String,
    /// 1-based.
    pub turn: usize,
    pub slot: String,
    pub gate_name: GateName,
    /// Mean gate activation over the feature dimension.
    pub weight: f64,
}

/// Per-(turn, slot, gate) mean weights under normal evaluation.
pub fn gate_traces(model: &Model, dialogues: &[Dialogue], decode: DecodeMode) -> Result<Vec<GateRecord>, EvalError> {
    let variant = model.config.variant;
    if !variant.has_turn_gate() && !variant.has_passage_fusion() {
        return Err(EvalError::NoGates(variant.name().to_string()));
    }
    let mut out = Vec::new();
    for d in dialogues {
        let (_, gates) = model.predict_with_gates(d, EvalMode::Normal, decode)?;
        for (t, turn_gates) in gates.iter().enumerate() {
            for (k, slot) in model.ontology.slots.iter().enumerate() {
                for (name, tensor) in turn_gates {
                    let (_, cols) = tensor.rows_cols();
                    let row = &tensor.data()[k * cols..(k + 1) * cols];
                    out.push(GateRecord {
                        dialogue_id: d.id.clone(),
                        turn: t + 1,
                        slot: slot.clone(),
                        gate_name: *name,
                        weight: row.iter().sum::<f64>() / cols as f64,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Writes gate traces as CSV with columns `dialogue_id,turn,slot,gate_name,weight`.
pub fn export_gate_traces(
    model: &Model,
    dialogues: &[Dialogue],
    decode: DecodeMode,
    path: &Path,
) -> Result<usize, EvalError> {
    let records = gate_traces(model, dialogues, decode)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in &records {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(records.len())
}
