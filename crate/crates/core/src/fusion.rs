//! The fusion network: four attention units, three gates and the turn-sequence encoder.

use std::fmt;
use std::str::FromStr;

use fpdsc_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{positional_encoding, AttentionUnit, Linear, Result, TransformerStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Base,
    TurnLevel,
    PassageLevel,
    DualLevel,
    ComparativeNoGate,
    ComparativeSingle,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::Base,
        ModelVariant::TurnLevel,
        ModelVariant::PassageLevel,
        ModelVariant::DualLevel,
        ModelVariant::ComparativeNoGate,
        ModelVariant::ComparativeSingle,
    ];

    pub fn uses_state_attention(self) -> bool {
        !matches!(self, Self::Base | Self::PassageLevel)
    }

    pub fn has_turn_gate(self) -> bool {
        matches!(self, Self::TurnLevel | Self::DualLevel | Self::ComparativeSingle)
    }

    /// Attention_4 and the passage gate.
    pub fn has_passage_fusion(self) -> bool {
        matches!(self, Self::PassageLevel | Self::DualLevel)
    }

    /// Gates recorded in traces, in output order.
    pub fn gates(self) -> Vec<GateName> {
        let mut out = Vec::new();
        if self.has_turn_gate() {
            out.push(GateName::Turn);
        }
        out.push(GateName::Balance);
        if self.has_passage_fusion() {
            out.push(GateName::Passage);
        }
        out
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::TurnLevel => "turn_level",
            Self::PassageLevel => "passage_level",
            Self::DualLevel => "dual_level",
            Self::ComparativeNoGate => "comparative_no_gate",
            Self::ComparativeSingle => "comparative_single",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = String;

    /// Accepts both the short flag names (`dual`, `no-gate`) and the full names.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "base" => Ok(Self::Base),
            "turn" | "turn_level" => Ok(Self::TurnLevel),
            "passage" | "passage_level" => Ok(Self::PassageLevel),
            "dual" | "dual_level" => Ok(Self::DualLevel),
            "no_gate" | "comparative_no_gate" => Ok(Self::ComparativeNoGate),
            "single" | "comparative_single" => Ok(Self::ComparativeSingle),
            _ => Err(format!(
                "unknown variant `{s}` (expected base, turn, passage, dual, no-gate or single)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateName {
    Turn,
    Balance,
    Passage,
}

impl GateName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Turn => "turn",
            Self::Balance => "balance",
            Self::Passage => "passage",
        }
    }
}

/// Replaces a gate's output with a constant, for ablation and equivalence checks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GateOverride {
    pub turn: Option<f64>,
    pub balance: Option<f64>,
    pub passage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionNetwork {
    pub d: usize,
    /// Slot over last state.
    pub a1: AttentionUnit,
    /// Slot over utterance tokens.
    pub a2: AttentionUnit,
    /// Slot over the turn sequence.
    pub a3: AttentionUnit,
    /// Passage feature over last state.
    pub a4: AttentionUnit,
    pub turn_gate: Linear,
    pub balance_gate: Linear,
    pub passage_gate: Linear,
    pub turn_sequence: TransformerStack,
}

/// Per-dialogue turn history consumed by the turn-sequence encoder.
#[derive(Debug, Clone, Default)]
pub struct FusionHistory {
    pub utterance: Vec<Var>,
    pub merged: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// `[|S| × d]` core features.
    pub feature: Var,
    /// `[|S| × d]` output of the balance gate.
    pub passage_feature: Var,
    pub gates: Vec<(GateName, Var)>,
}

impl FusionNetwork {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        heads: usize,
        ff: usize,
        turn_layers: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            d,
            a1: AttentionUnit::new(store, "fusion.a1", d, heads, rng),
            a2: AttentionUnit::new(store, "fusion.a2", d, heads, rng),
            a3: AttentionUnit::new(store, "fusion.a3", d, heads, rng),
            a4: AttentionUnit::new(store, "fusion.a4", d, heads, rng),
            turn_gate: Linear::new(store, "fusion.turn_gate", 2 * d, d, false, rng),
            balance_gate: Linear::new(store, "fusion.balance_gate", 2 * d, d, false, rng),
            passage_gate: Linear::new(store, "fusion.passage_gate", 2 * d, d, false, rng),
            turn_sequence: TransformerStack::new(store, "fusion.turn_sequence", turn_layers, d, heads, ff, rng),
        }
    }

    pub fn gate_params(&self) -> [ParamId; 3] {
        [
            self.turn_gate.weight,
            self.balance_gate.weight,
            self.passage_gate.weight,
        ]
    }

    /// `σ([x; y] W)`, or the forced constant.
    fn gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        weight: &Linear,
        x: Var,
        y: Var,
        forced: Option<f64>,
    ) -> Result<Var> {
        if let Some(value) = forced {
            let shape = g.shape(x).to_vec();
            return Ok(g.constant(Tensor::filled(&shape, value)?));
        }
        let xy = g.concat_cols(&[x, y])?;
        let z = weight.forward(g, store, xy)?;
        g.sigmoid(z)
    }

    /// Runs one turn: `slots` `[|S|×d]`, `tokens` `[T×d]`, `last_state` `[|S|×d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        variant: ModelVariant,
        forced: GateOverride,
        slots: Var,
        tokens: Var,
        last_state: Var,
        history: &mut FusionHistory,
    ) -> Result<FusionOutput> {
        let n_slots = g.rows_cols(slots).0;
        let mut gates = Vec::with_capacity(3);

        let c = self.a2.dense(g, store, slots, tokens)?;
        let m = match variant {
            ModelVariant::Base | ModelVariant::PassageLevel => c,
            ModelVariant::ComparativeNoGate => {
                let l = self.a1.dense(g, store, slots, last_state)?;
                self.a2.dense(g, store, l, tokens)?
            }
            ModelVariant::TurnLevel | ModelVariant::DualLevel | ModelVariant::ComparativeSingle => {
                let l = self.a1.dense(g, store, slots, last_state)?;
                let gt = self.gate(g, store, &self.turn_gate, c, l, forced.turn)?;
                gates.push((GateName::Turn, gt));
                g.blend(gt, c, l)?
            }
        };
        history.utterance.push(c);
        history.merged.push(m);

        let t = history.merged.len();
        let mut sources: Vec<Var> = if variant == ModelVariant::ComparativeSingle {
            history.utterance[..t - 1].to_vec()
        } else {
            history.merged[..t - 1].to_vec()
        };
        sources.push(m);
        let picks: Vec<(usize, usize)> = (0..n_slots).flat_map(|s| (0..t).map(move |k| (k, s))).collect();
        let seq = g.gather_rows(&sources, &picks)?;
        let pe_block = positional_encoding(t, self.d);
        let pe: Vec<f64> = (0..n_slots).flat_map(|_| pe_block.iter().copied()).collect();
        let pe = g.constant(Tensor::matrix(n_slots * t, self.d, pe)?);
        let seq = g.add(seq, pe)?;
        let encoded = self.turn_sequence.forward(g, store, seq, t)?;
        let m_pl = self.a3.forward(g, store, slots, encoded, 1, t)?;

        let gb = self.gate(g, store, &self.balance_gate, m, m_pl, forced.balance)?;
        gates.push((GateName::Balance, gb));
        let f_pl = g.blend(gb, m_pl, m)?;

        let feature = if variant.has_passage_fusion() {
            let f_state = self.a4.dense(g, store, f_pl, last_state)?;
            let gp = self.gate(g, store, &self.passage_gate, f_pl, f_state, forced.passage)?;
            gates.push((GateName::Passage, gp));
            g.blend(gp, f_pl, f_state)?
        } else {
            f_pl
        };
        Ok(FusionOutput {
            feature,
            passage_feature: f_pl,
            gates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in ModelVariant::ALL {
            assert_eq!(v.name().parse::<ModelVariant>().unwrap(), v);
        }
        assert_eq!(
            "no-gate".parse::<ModelVariant>().unwrap(),
            ModelVariant::ComparativeNoGate
        );
        assert_eq!("dual".parse::<ModelVariant>().unwrap(), ModelVariant::DualLevel);
        assert!("triple".parse::<ModelVariant>().is_err());
    }

    #[test]
    fn gate_sets_follow_the_wiring() {
        use GateName::*;
        assert_eq!(ModelVariant::Base.gates(), [Balance]);
        assert_eq!(ModelVariant::TurnLevel.gates(), [Turn, Balance]);
        assert_eq!(ModelVariant::PassageLevel.gates(), [Balance, Passage]);
        assert_eq!(ModelVariant::DualLevel.gates(), [Turn, Balance, Passage]);
        assert_eq!(ModelVariant::ComparativeNoGate.gates(), [Balance]);
    }
}
