//! The full tracker: encoders, fusion network and output head behind one parameter store.

use std::fmt;
use std::str::FromStr;

use fpdsc_tensor::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Turn};
use crate::encoders::{utterance_ids, FixedCache, FixedEncoder, TunableEncoder, MAX_SEQ_LEN};
use crate::error::ModelError;
use crate::fusion::{FusionHistory, FusionNetwork, GateName, GateOverride, ModelVariant};
use crate::objectives::{decode_state, scores_to_distribution, value_scores, DecodeMode, OutputHead};
use crate::ontology::{DialogueState, Ontology};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            _ => Err(format!("unknown preset `{s}` (expected paper or desk)")),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Desk => "desk",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub encoder_layers: usize,
    pub turn_layers: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    /// Seeds parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn preset(preset: Preset, variant: ModelVariant) -> Self {
        match preset {
            Preset::Paper => Self {
                variant,
                d: 784,
                heads: 4,
                ff: 3136,
                encoder_layers: 12,
                turn_layers: 6,
                dropout: 0.1,
                max_seq_len: MAX_SEQ_LEN,
                seed: 0,
            },
            Preset::Desk => Self {
                variant,
                d: 64,
                heads: 4,
                ff: 128,
                encoder_layers: 2,
                turn_layers: 2,
                dropout: 0.1,
                max_seq_len: MAX_SEQ_LEN,
                seed: 0,
            },
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d < 2 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!(
                "width {} must be at least 2 and divisible by {} heads",
                self.d, self.heads
            ));
        }
        if self.ff == 0 || self.turn_layers == 0 {
            return bad("feed-forward width and turn layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_seq_len < 4 {
            return bad("max_seq_len must be at least 4".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub ontology: Ontology,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub fixed: FixedEncoder,
    pub cache: FixedCache,
    pub encoder: TunableEncoder,
    pub fusion: FusionNetwork,
    pub head: OutputHead,
    pub gate_override: GateOverride,
}

/// Graph handles produced by one turn.
#[derive(Debug, Clone)]
pub struct TurnOutput {
    /// `[|S| × d]` core features.
    pub feature: Var,
    pub passage_feature: Var,
    /// Per slot, negated distances to each candidate.
    pub scores: Vec<Var>,
    /// `[|S| × 1]` update logits.
    pub transition: Var,
    pub gates: Vec<(GateName, Var)>,
}

impl TurnOutput {
    pub fn distributions(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.scores
            .iter()
            .map(|&s| scores_to_distribution(g.value(s)))
            .collect()
    }

    pub fn transition_probabilities(&self, g: &Graph) -> Vec<f64> {
        g.value(self.transition)
            .iter()
            .map(|&z| 1.0 / (1.0 + (-z).exp()))
            .collect()
    }

    pub fn decode(
        &self,
        g: &Graph,
        ontology: &Ontology,
        previous: &DialogueState,
        mode: DecodeMode,
    ) -> std::result::Result<DialogueState, ModelError> {
        decode_state(
            ontology,
            &self.distributions(g),
            &self.transition_probabilities(g),
            previous,
            mode,
        )
    }
}

/// Stateful per-dialogue forward pass; turns must be fed in order on one graph.
pub struct Session<'m> {
    model: &'m Model,
    history: FusionHistory,
    previous_context: Option<Var>,
    slots: Option<Var>,
    candidates: Vec<Var>,
}

impl<'m> Session<'m> {
    pub fn turns(&self) -> usize {
        self.history.merged.len()
    }

    /// Runs the next turn. Dropout is active only when `rng` is given.
    pub fn step(
        &mut self,
        g: &mut Graph,
        system: &str,
        user: &str,
        previous: &DialogueState,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TurnOutput, ModelError> {
        let model = self.model;
        let store = &model.store;
        let n_slots = model.ontology.num_slots();
        let slots = *self.slots.get_or_insert_with(|| g.constant(model.cache.slots.clone()));
        if self.candidates.is_empty() {
            self.candidates = model.cache.values.iter().map(|t| g.constant(t.clone())).collect();
        }
        let ids = utterance_ids(&model.vocab, system, user, model.config.max_seq_len)?;
        let tokens = model.encoder.encode(g, store, &ids)?;
        let last_state = g.constant(model.cache.encode_last_state(&model.ontology, previous)?);
        let fused = model.fusion.step(
            g,
            store,
            model.config.variant,
            model.gate_override,
            slots,
            tokens,
            last_state,
            &mut self.history,
        )?;
        let o = model.head.project(g, store, fused.feature, model.config.dropout, rng)?;
        let mut scores = Vec::with_capacity(n_slots);
        for (k, &cands) in self.candidates.iter().enumerate() {
            let row = g.slice_rows(o, k, 1)?;
            scores.push(value_scores(g, row, cands)?);
        }
        let context = model.head.transition_context(g, store, fused.feature)?;
        let previous_context = match self.previous_context {
            Some(v) => v,
            None => g.constant(Tensor::zeros(&[n_slots, model.config.d])?),
        };
        let transition = model.head.transition_logits(g, store, context, previous_context)?;
        self.previous_context = Some(context);
        Ok(TurnOutput {
            feature: fused.feature,
            passage_feature: fused.passage_feature,
            scores,
            transition,
            gates: fused.gates,
        })
    }
}

/// How previous states are supplied during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// The model's own prediction from the previous turn.
    #[default]
    Normal,
    /// The gold previous state.
    TeacherForcing,
}

impl FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "normal" => Ok(Self::Normal),
            "teacher_forcing" => Ok(Self::TeacherForcing),
            _ => Err(format!("unknown mode `{s}` (expected normal or teacher-forcing)")),
        }
    }
}

/// Core features and gate weights for every turn of one dialogue.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueFeatures {
    /// Per turn, `[|S| × d]`.
    pub features: Vec<Tensor>,
    /// Per turn, `[|S| × d]` balance-gate outputs.
    pub passage_features: Vec<Tensor>,
    /// Per turn, gate name with its `[|S| × d]` weights.
    pub gates: Vec<Vec<(GateName, Tensor)>>,
}

impl Model {
    pub fn new(config: ModelConfig, ontology: Ontology, vocab: Vocabulary) -> Result<Self, ModelError> {
        config.validate()?;
        ontology.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let fixed = FixedEncoder::new(&mut store, vocab.len(), config.d, &mut rng);
        let encoder = TunableEncoder::new(
            &mut store,
            vocab.len(),
            config.d,
            config.heads,
            config.ff,
            config.encoder_layers,
            &mut rng,
        );
        let fusion = FusionNetwork::new(
            &mut store,
            config.d,
            config.heads,
            config.ff,
            config.turn_layers,
            &mut rng,
        );
        let head = OutputHead::new(&mut store, config.d, &mut rng);
        let cache = FixedCache::build(&fixed, &store, &vocab, &ontology);
        Ok(Self {
            config,
            ontology,
            vocab,
            store,
            fixed,
            cache,
            encoder,
            fusion,
            head,
            gate_override: GateOverride::default(),
        })
    }

    /// Recomputes frozen encodings after the fixed embedding table was replaced.
    pub fn refresh_cache(&mut self) {
        self.cache = FixedCache::build(&self.fixed, &self.store, &self.vocab, &self.ontology);
    }

    pub fn session(&self) -> Session<'_> {
        Session {
            model: self,
            history: FusionHistory::default(),
            previous_context: None,
            slots: None,
            candidates: Vec::new(),
        }
    }

    /// Features for every turn given the previous state entering each turn (dropout off).
    pub fn forward_dialogue(&self, turns: &[Turn], previous: &[DialogueState]) -> Result<DialogueFeatures, ModelError> {
        if previous.len() != turns.len() {
            return Err(ModelError::StateCount {
                states: previous.len(),
                turns: turns.len(),
            });
        }
        let mut g = Graph::new();
        let mut session = self.session();
        let mut out = DialogueFeatures {
            features: Vec::new(),
            passage_features: Vec::new(),
            gates: Vec::new(),
        };
        for (turn, prev) in turns.iter().zip(previous) {
            let step = session.step(&mut g, &turn.system, &turn.user, prev, None)?;
            out.features.push(g.tensor(step.feature));
            out.passage_features.push(g.tensor(step.passage_feature));
            out.gates
                .push(step.gates.iter().map(|&(n, v)| (n, g.tensor(v))).collect());
        }
        Ok(out)
    }

    /// Predicted state after each turn.
    pub fn predict(
        &self,
        dialogue: &Dialogue,
        mode: EvalMode,
        decode: DecodeMode,
    ) -> Result<Vec<DialogueState>, ModelError> {
        Ok(self.predict_with_gates(dialogue, mode, decode)?.0)
    }

    /// Predictions together with per-turn gate weights.
    pub fn predict_with_gates(
        &self,
        dialogue: &Dialogue,
        mode: EvalMode,
        decode: DecodeMode,
    ) -> Result<(Vec<DialogueState>, Vec<Vec<(GateName, Tensor)>>), ModelError> {
        let mut g = Graph::new();
        let mut session = self.session();
        let mut predicted_prev = self.ontology.empty_state();
        let mut states = Vec::with_capacity(dialogue.turns.len());
        let mut gates = Vec::with_capacity(dialogue.turns.len());
        for (t, turn) in dialogue.turns.iter().enumerate() {
            let prev = match mode {
                EvalMode::Normal => predicted_prev.clone(),
                EvalMode::TeacherForcing => dialogue.state_before(t, &self.ontology),
            };
            let step = session.step(&mut g, &turn.system, &turn.user, &prev, None)?;
            let state = step.decode(&g, &self.ontology, &prev, decode)?;
            gates.push(step.gates.iter().map(|&(n, v)| (n, g.tensor(v))).collect());
            predicted_prev = state.clone();
            states.push(state);
        }
        Ok((states, gates))
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }
}
