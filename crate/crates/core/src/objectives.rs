//! Value scoring, state-transition prediction, losses and state decoding.

use fpdsc_tensor::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, OntologyError};
use crate::layers::{LayerNorm, Linear, Result};
use crate::ontology::{canonical, DialogueState, Ontology};

/// Projection `o = LayerNorm(Linear(Dropout(f)))` and the transition head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputHead {
    pub projection: Linear,
    pub norm: LayerNorm,
    /// `W_c`, `[d × d]`.
    pub transition_context: Linear,
    /// `W_p`, `[2d × 1]`.
    pub transition_output: Linear,
}

impl OutputHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        Self {
            projection: Linear::new(store, "head.projection", d, d, true, rng),
            norm: LayerNorm::new(store, "head.norm", d),
            transition_context: Linear::new(store, "head.transition_context", d, d, false, rng),
            transition_output: Linear::new(store, "head.transition_output", 2 * d, 1, false, rng),
        }
    }

    /// Dropout is applied only when `rng` is given.
    pub fn project<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f: Var,
        dropout: f64,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let x = match rng {
            Some(rng) => g.dropout(f, dropout, true, rng)?,
            None => f,
        };
        let x = self.projection.forward(g, store, x)?;
        self.norm.forward(g, store, x)
    }

    /// `tanh(f W_c)`.
    pub fn transition_context(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let z = self.transition_context.forward(g, store, f)?;
        g.tanh(z)
    }

    /// Update logits `[c_t; c_{t−1}] W_p`, one row per slot.
    pub fn transition_logits(&self, g: &mut Graph, store: &ParamStore, current: Var, previous: Var) -> Result<Var> {
        let both = g.concat_cols(&[current, previous])?;
        self.transition_output.forward(g, store, both)
    }
}

/// Negated distances from `o` (`[1×d]`) to each candidate row; softmax of these is the value distribution.
pub fn value_scores(g: &mut Graph, o: Var, candidates: Var) -> Result<Var> {
    let d = g.row_distances(o, candidates)?;
    g.scale(d, -1.0)
}

/// `−log p(gold)` from value scores.
pub fn dst_term(g: &mut Graph, scores: Var, gold: usize) -> Result<Var> {
    let lp = g.log_softmax(scores)?;
    let p = g.pick(lp, gold)?;
    g.scale(p, -1.0)
}

/// Binary cross-entropy summed over rows of `logits` (`[n×1]` or `[n]`) against 0/1 `labels`.
pub fn stp_loss(g: &mut Graph, logits: Var, labels: &[f64]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let pos = g.log_sigmoid(logits)?;
    let flipped = g.scale(logits, -1.0)?;
    let neg = g.log_sigmoid(flipped)?;
    let y = g.constant(Tensor::new(&shape, labels.to_vec())?);
    let not_y = g.constant(Tensor::new(&shape, labels.iter().map(|v| 1.0 - v).collect())?);
    let a = g.mul(y, pos)?;
    let b = g.mul(not_y, neg)?;
    let s = g.add(a, b)?;
    let total = g.sum(s)?;
    g.scale(total, -1.0)
}

/// Softmax of negated distances, computed directly.
pub fn distances_to_distribution(distances: &[f64]) -> Vec<f64> {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = distances.iter().map(|d| (-(d - min)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn scores_to_distribution(scores: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
    distances_to_distribution(&neg)
}

/// `−log p(gold)` summed over every (turn, slot); `gold[i]` indexes into `distributions[i]`.
pub fn dst_loss(distributions: &[Vec<f64>], gold: &[usize]) -> f64 {
    distributions.iter().zip(gold).map(|(p, &g)| -p[g].ln()).sum()
}

/// Full binary cross-entropy over probabilities.
pub fn bce(probabilities: &[f64], labels: &[f64]) -> f64 {
    probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let term = |w: f64, q: f64| if w == 0.0 { 0.0 } else { w * q.ln() };
            -(term(y, p) + term(1.0 - y, 1.0 - p))
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dst: f64,
    pub stp: f64,
    pub joint: f64,
}

impl LossBreakdown {
    pub fn new(dst: f64, stp: f64) -> Self {
        Self {
            dst,
            stp,
            joint: dst + stp,
        }
    }
}

/// 1 where the slot's gold value differs from the previous gold value.
pub fn transition_labels(ontology: &Ontology, previous: &DialogueState, current: &DialogueState) -> Vec<f64> {
    ontology
        .slots
        .iter()
        .map(|s| {
            if canonical(previous.value(s)) == canonical(current.value(s)) {
                0.0
            } else {
                1.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Every slot takes its most probable value.
    #[default]
    Argmax,
    /// A slot takes its most probable value only when the transition head predicts an update.
    Gated,
}

impl std::str::FromStr for DecodeMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "argmax" => Ok(Self::Argmax),
            "gated" => Ok(Self::Gated),
            _ => Err(format!("unknown decode mode `{s}` (expected argmax or gated)")),
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Builds the next state from per-slot distributions (ontology order) and update probabilities.
pub fn decode_state(
    ontology: &Ontology,
    distributions: &[Vec<f64>],
    transitions: &[f64],
    previous: &DialogueState,
    mode: DecodeMode,
) -> std::result::Result<DialogueState, ModelError> {
    if distributions.len() != ontology.num_slots() || transitions.len() != ontology.num_slots() {
        return Err(ModelError::Input(format!(
            "expected {} slot predictions, got {} distributions and {} transitions",
            ontology.num_slots(),
            distributions.len(),
            transitions.len()
        )));
    }
    let mut out = DialogueState::default();
    for (k, slot) in ontology.slots.iter().enumerate() {
        let cands = ontology.candidates(slot)?;
        if distributions[k].len() != cands.len() {
            return Err(OntologyError::Invalid(format!("distribution size mismatch for {slot}")).into());
        }
        let keep = mode == DecodeMode::Gated && transitions[k] < 0.5;
        if keep {
            out.set(slot, previous.value(slot));
        } else {
            out.set(slot, &cands[argmax(&distributions[k])]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_from_distances() {
        let p = distances_to_distribution(&[0.0, 1.0, 2.0]);
        assert!((p[0] - 0.665).abs() < 1e-3 && (p[1] - 0.245).abs() < 1e-3 && (p[2] - 0.090).abs() < 1e-3);
        let u = distances_to_distribution(&[3.0, 3.0, 3.0, 3.0]);
        assert!(u.iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn bce_hand_case() {
        assert!((bce(&[0.9, 0.2], &[1.0, 0.0]) - 0.3285).abs() < 1e-4);
        assert!((bce(&[0.5], &[0.0]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(bce(&[1.0], &[1.0]), 0.0);
    }

    #[test]
    fn joint_is_exact_sum() {
        assert_eq!(LossBreakdown::new(1.5, 0.5).joint, 2.0);
        assert_eq!(LossBreakdown::new(0.0, 0.0).joint, 0.0);
    }
}
