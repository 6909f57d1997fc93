//! Two-phase training: teacher forcing, then uniform scheduled sampling.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use fpdsc_tensor::{Graph, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, TrainerState};
use crate::corpus::Dialogue;
use crate::error::{ModelError, TrainError};
use crate::evaluation::joint_accuracy_of;
use crate::model::{EvalMode, Model};
use crate::objectives::{dst_term, stp_loss, transition_labels, DecodeMode, LossBreakdown};
use crate::ontology::DialogueState;
use crate::optim::{Adam, LinearSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    TeacherForcing,
    ScheduledSampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhasePlan {
    #[default]
    Both,
    TeacherForcingOnly,
}

impl std::str::FromStr for PhasePlan {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "both" => Ok(Self::Both),
            "teacher_forcing_only" => Ok(Self::TeacherForcingOnly),
            _ => Err(format!(
                "unknown phase plan `{s}` (expected both or teacher-forcing-only)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_proportion: f64,
    pub patience_epochs: usize,
    /// Epoch cap per phase; also sizes the learning-rate schedule.
    pub epochs_budget: usize,
    /// Probability of feeding the predicted previous state in the scheduled-sampling phase.
    pub sampling_prob: f64,
    pub max_grad_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub phases: PhasePlan,
    pub decode: DecodeMode,
    pub seed: u64,
    /// Ends a phase as soon as dev joint accuracy reaches this value.
    pub target_dev_accuracy: Option<f64>,
}

impl TrainingConfig {
    /// Optimizer settings of the original large-scale setup.
    pub fn paper() -> Self {
        Self {
            batch_size: 2,
            peak_lr: 1e-4,
            patience_epochs: 15,
            ..Self::default()
        }
    }

    /// Settings that converge on the synthetic corpus on one CPU core.
    pub fn desk() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_proportion) {
            return bad("warmup_proportion must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.sampling_prob) {
            return bad("sampling_prob must be in [0, 1]");
        }
        if self.epochs_budget == 0 || self.patience_epochs == 0 {
            return bad("epochs_budget and patience_epochs must be positive");
        }
        if self.max_grad_norm <= 0.0 {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            peak_lr: 2e-3,
            warmup_proportion: 0.1,
            patience_epochs: 15,
            epochs_budget: 50,
            sampling_prob: 0.5,
            max_grad_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            phases: PhasePlan::Both,
            decode: DecodeMode::Argmax,
            seed: 0,
            target_dev_accuracy: None,
        }
    }
}

/// Chooses the previous-state input for one turn: the prediction with probability `p`, else gold.
/// No random draw is made when `p` is 0 or 1.
pub fn sample_states<R: Rng + ?Sized>(
    gold_prev: &DialogueState,
    predicted_prev: &DialogueState,
    p: f64,
    rng: &mut R,
) -> (DialogueState, bool) {
    let use_predicted = if p <= 0.0 {
        false
    } else if p >= 1.0 {
        true
    } else {
        rng.random::<f64>() < p
    };
    if use_predicted {
        (predicted_prev.clone(), true)
    } else {
        (gold_prev.clone(), false)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub l_dst: f64,
    pub l_stp: f64,
    pub l_joint: f64,
    pub joint_acc_dev: f64,
    pub best_dev: f64,
    pub epochs_since_best: usize,
    pub predicted_state_inputs: usize,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best_dev_accuracy: f64,
    pub best_epoch: usize,
    pub best_phase: Phase,
    /// Best dev accuracy reached in the teacher-forcing phase.
    pub teacher_forcing_best: f64,
    pub metrics: Vec<EpochMetrics>,
}

/// Mean per-dialogue losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub losses: LossBreakdown,
    pub predicted_state_inputs: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Best {
    accuracy: f64,
    epoch: usize,
    phase: Phase,
    params: Vec<Tensor>,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainingConfig,
    optimizer: Adam,
    /// Sized from the training set on first use.
    schedule: Option<LinearSchedule>,
    rng: ChaCha8Rng,
    state: TrainerState,
    best: Option<Best>,
    metrics: Vec<EpochMetrics>,
    out_dir: Option<PathBuf>,
}

fn non_finite(dialogue: &Dialogue, turn: usize) -> impl FnOnce(ModelError) -> TrainError + '_ {
    move |e| match e {
        ModelError::Tensor(source @ TensorError::NonFinite { .. }) => TrainError::NonFinite {
            dialogue: dialogue.id.clone(),
            turn: turn + 1,
            source,
        },
        other => TrainError::Model(other),
    }
}

fn tensor_err(dialogue: &Dialogue, turn: usize) -> impl FnOnce(TensorError) -> TrainError + '_ {
    move |e| non_finite(dialogue, turn)(ModelError::Tensor(e))
}

/// Builds the joint loss of one dialogue on `g`, feeding predicted previous states with
/// probability `sampling_prob` per turn. Returns the loss node, its breakdown and how many
/// turns consumed a predicted state.
pub fn dialogue_loss(
    model: &Model,
    g: &mut Graph,
    dialogue: &Dialogue,
    sampling_prob: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, LossBreakdown, usize), TrainError> {
    let ontology = &model.ontology;
    let mut session = model.session();
    let mut predicted_prev = ontology.empty_state();
    let mut predicted_inputs = 0;
    let mut fallback = ChaCha8Rng::seed_from_u64(0);
    let mut dst_terms = Vec::new();
    let mut stp_terms = Vec::new();
    for (t, turn) in dialogue.turns.iter().enumerate() {
        let gold_prev = dialogue.state_before(t, ontology);
        let prev = if t == 0 {
            gold_prev.clone()
        } else {
            let (state, predicted) = match rng.as_deref_mut() {
                Some(r) => sample_states(&gold_prev, &predicted_prev, sampling_prob, r),
                None => sample_states(&gold_prev, &predicted_prev, sampling_prob, &mut fallback),
            };
            predicted_inputs += usize::from(predicted);
            state
        };
        let out = session
            .step(g, &turn.system, &turn.user, &prev, rng.as_deref_mut())
            .map_err(non_finite(dialogue, t))?;
        for (k, slot) in ontology.slots.iter().enumerate() {
            let gold = ontology
                .value_index(slot, turn.state.value(slot))
                .map_err(|e| TrainError::Model(e.into()))?;
            dst_terms.push(dst_term(g, out.scores[k], gold).map_err(tensor_err(dialogue, t))?);
        }
        let labels = transition_labels(ontology, &gold_prev, &turn.state);
        stp_terms.push(stp_loss(g, out.transition, &labels).map_err(tensor_err(dialogue, t))?);
        if sampling_prob > 0.0 {
            predicted_prev = out
                .decode(g, ontology, &prev, DecodeMode::Argmax)
                .map_err(non_finite(dialogue, t))?;
        }
    }
    let last = dialogue.turns.len().saturating_sub(1);
    let sum = |terms: &[Var], g: &mut Graph| -> Result<Var, TrainError> {
        let mut acc = terms[0];
        for &v in &terms[1..] {
            acc = g.add(acc, v).map_err(tensor_err(dialogue, last))?;
        }
        Ok(acc)
    };
    let dst = sum(&dst_terms, g)?;
    let stp = sum(&stp_terms, g)?;
    let total = g.add(dst, stp).map_err(tensor_err(dialogue, last))?;
    let breakdown = LossBreakdown::new(g.scalar(dst), g.scalar(stp));
    Ok((total, breakdown, predicted_inputs))
}

impl Trainer {
    pub fn new(model: Model, config: TrainingConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let optimizer = Adam::with_betas(&model.store, config.beta1, config.beta2, config.adam_eps);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            optimizer,
            schedule: None,
            rng,
            state: TrainerState::default(),
            best: None,
            metrics: Vec::new(),
            out_dir: None,
            model,
            config,
        })
    }

    /// Writes `metrics.jsonl`, `best.ckpt` and `last.ckpt` into `dir`.
    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    fn reset_optimizer(&mut self, train_len: usize) {
        self.optimizer = Adam::with_betas(
            &self.model.store,
            self.config.beta1,
            self.config.beta2,
            self.config.adam_eps,
        );
        self.schedule = Some(self.new_schedule(train_len));
    }

    /// One shuffled pass over `train` with the given previous-state sampling probability.
    pub fn run_epoch(&mut self, train: &[Dialogue], sampling_prob: f64) -> Result<EpochLosses, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let schedule = match self.schedule {
            Some(s) => s,
            None => *self.schedule.insert(self.new_schedule(train.len())),
        };
        let mut totals = LossBreakdown::default();
        let mut predicted = 0;
        for batch in order.chunks(self.config.batch_size) {
            for &i in batch {
                let d = &train[i];
                let mut g = Graph::new();
                let (loss, parts, used) = dialogue_loss(&self.model, &mut g, d, sampling_prob, Some(&mut self.rng))?;
                let grads = g.backward(loss).map_err(tensor_err(d, d.turns.len() - 1))?;
                self.model
                    .store
                    .accumulate(&grads)
                    .map_err(tensor_err(d, d.turns.len() - 1))?;
                totals.dst += parts.dst;
                totals.stp += parts.stp;
                predicted += used;
            }
            let lr = schedule.lr(self.state.step);
            self.optimizer.update(
                &mut self.model.store,
                lr,
                1.0 / batch.len() as f64,
                Some(self.config.max_grad_norm),
            );
            self.state.step += 1;
        }
        let n = train.len() as f64;
        self.state.predicted_state_inputs += predicted;
        Ok(EpochLosses {
            losses: LossBreakdown::new(totals.dst / n, totals.stp / n),
            predicted_state_inputs: predicted,
        })
    }

    pub fn dev_accuracy(&self, dev: &[Dialogue]) -> Result<f64, TrainError> {
        Ok(joint_accuracy_of(
            &self.model,
            dev,
            EvalMode::Normal,
            self.config.decode,
        )?)
    }

    fn snapshot(&self) -> Vec<Tensor> {
        self.model.store.iter().map(|(_, p)| p.tensor.clone()).collect()
    }

    fn restore(&mut self, params: &[Tensor]) {
        let ids: Vec<_> = self.model.store.ids().collect();
        for (id, t) in ids.into_iter().zip(params) {
            let p = self.model.store.get_mut(id);
            p.tensor.data_mut().copy_from_slice(t.data());
            p.tensor.zero_grad();
        }
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, Some(&self.optimizer), &self.rng, self.state.clone())
    }

    fn log(&self, m: &EpochMetrics) -> Result<(), TrainError> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        let path = dir.join("metrics.jsonl");
        let io = |source| TrainError::Log {
            path: path.clone(),
            source,
        };
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(f, "{line}").map_err(io)
    }

    /// Runs both phases (or only teacher forcing) and leaves the overall best weights in the model.
    pub fn train(&mut self, train: &[Dialogue], dev: &[Dialogue]) -> Result<TrainOutcome, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let train_ids: std::collections::BTreeSet<&str> = train.iter().map(|d| d.id.as_str()).collect();
        if let Some(d) = dev.iter().find(|d| train_ids.contains(d.id.as_str())) {
            return Err(TrainError::Overlap(d.id.clone()));
        }
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir).map_err(|source| TrainError::Log {
                path: dir.clone(),
                source,
            })?;
        }
        let phases: &[Phase] = match self.config.phases {
            PhasePlan::Both => &[Phase::TeacherForcing, Phase::ScheduledSampling],
            PhasePlan::TeacherForcingOnly => &[Phase::TeacherForcing],
        };
        let fresh = self.state.epoch == 0;
        for &phase in phases {
            if phase < self.state.phase || (phase == self.state.phase && self.state.phase_done) {
                continue;
            }
            if fresh || phase > self.state.phase {
                if phase > self.state.phase {
                    if let Some(best) = self.best.clone() {
                        self.restore(&best.params);
                    }
                }
                self.state.phase = phase;
                self.state.phase_epoch = 0;
                self.state.epochs_since_best = 0;
                self.state.phase_done = false;
                self.state.step = 0;
                self.reset_optimizer(train.len());
            } else {
                self.schedule = Some(self.new_schedule(train.len()));
            }
            let p = match phase {
                Phase::TeacherForcing => 0.0,
                Phase::ScheduledSampling => self.config.sampling_prob,
            };
            while self.state.phase_epoch < self.config.epochs_budget {
                let losses = self.run_epoch(train, p)?;
                self.state.epoch += 1;
                self.state.phase_epoch += 1;
                let acc = self.dev_accuracy(dev)?;
                let improved = self.best.as_ref().is_none_or(|b| acc > b.accuracy);
                if improved {
                    self.best = Some(Best {
                        accuracy: acc,
                        epoch: self.state.epoch,
                        phase,
                        params: self.snapshot(),
                    });
                    self.state.best_dev = acc;
                    self.state.best_epoch = self.state.epoch;
                    self.state.epochs_since_best = 0;
                    if let Some(dir) = &self.out_dir {
                        checkpoint::save(&dir.join("best.ckpt"), &self.checkpoint())?;
                    }
                } else {
                    self.state.epochs_since_best += 1;
                }
                if phase == Phase::TeacherForcing {
                    self.state.teacher_forcing_best = self.state.teacher_forcing_best.max(acc);
                }
                let m = EpochMetrics {
                    epoch: self.state.epoch,
                    phase,
                    l_dst: losses.losses.dst,
                    l_stp: losses.losses.stp,
                    l_joint: losses.losses.joint,
                    joint_acc_dev: acc,
                    best_dev: self.state.best_dev,
                    epochs_since_best: self.state.epochs_since_best,
                    predicted_state_inputs: losses.predicted_state_inputs,
                    steps: self.state.step,
                };
                self.log(&m)?;
                self.metrics.push(m);
                let reached = self.config.target_dev_accuracy.is_some_and(|t| acc >= t);
                let exhausted = self.state.epochs_since_best >= self.config.patience_epochs;
                self.state.phase_done = reached || exhausted;
                if let Some(dir) = &self.out_dir {
                    checkpoint::save(&dir.join("last.ckpt"), &self.checkpoint())?;
                }
                if self.state.phase_done {
                    break;
                }
            }
        }
        let best = self.best.clone().expect("at least one epoch ran");
        self.restore(&best.params);
        Ok(TrainOutcome {
            best_dev_accuracy: best.accuracy,
            best_epoch: best.epoch,
            best_phase: best.phase,
            teacher_forcing_best: self.state.teacher_forcing_best,
            metrics: self.metrics.clone(),
        })
    }

    /// Warmup and decay span `epochs_budget` epochs of `train_len` dialogues.
    fn new_schedule(&self, train_len: usize) -> LinearSchedule {
        let total = train_len.div_ceil(self.config.batch_size) as u64 * self.config.epochs_budget as u64;
        LinearSchedule::new(self.config.peak_lr, self.config.warmup_proportion, total)
    }

    /// Restores a trainer from `last.ckpt` in `dir` (and the best weights from `best.ckpt`).
    pub fn resume(dir: &Path, config: TrainingConfig) -> Result<Self, TrainError> {
        let last = checkpoint::load(&dir.join("last.ckpt"))?;
        let (model, optimizer, rng, state) = last.into_parts()?;
        let mut trainer = Self::new(model, config)?;
        if let Some(opt) = optimizer {
            trainer.optimizer = opt;
        }
        trainer.rng = rng;
        let best_path = dir.join("best.ckpt");
        if best_path.exists() {
            let best = checkpoint::load(&best_path)?;
            let (best_model, _, _, best_state) = best.into_parts()?;
            trainer.best = Some(Best {
                accuracy: best_state.best_dev,
                epoch: best_state.best_epoch,
                phase: best_state.phase,
                params: best_model.store.iter().map(|(_, p)| p.tensor.clone()).collect(),
            });
        }
        trainer.state = state;
        trainer.metrics = read_metrics(&dir.join("metrics.jsonl")).unwrap_or_default();
        trainer.out_dir = Some(dir.to_path_buf());
        Ok(trainer)
    }
}

pub fn read_metrics(path: &Path) -> std::io::Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}
