use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusSplit, Dialogue, Phenomenon, Turn};
use crate::error::CorpusError;
use crate::ontology::{generate_ontology, DialogueState, Ontology, OntologySpec, NONE};

const OPENERS: &[&str] = &[
    "what else can i help with ?",
    "is there anything else ?",
    "how can i help ?",
    "sure , anything else ?",
];
const INFORM: &[&str] = &[
    "i need a {d} {p}",
    "i am looking for a {d} {p}",
    "can you find me a {d} {p} ?",
    "please find a {d} {p}",
];
const OFFER_SYSTEM: &[&str] = &[
    "i recommend the {d} {v} .",
    "{v} is a nice {d} .",
    "how about the {d} {v} ?",
];
const OFFER_USER: &[&str] = &["yes , please book it", "that sounds good", "great , i will take it"];
const CHANGE: &[&str] = &["actually , i want a {d} {p} instead", "sorry , make that a {d} {p}"];
const REJECT_SYSTEM: &[&str] = &[
    "sorry , the booking at that {d} failed .",
    "unfortunately that {d} is fully booked .",
];
const REJECT_USER: &[&str] = &[
    "please find another {d}",
    "can you try another {d} ?",
    "ok , find me a different {d}",
];
const DROP_USER: &[&str] = &[
    "actually , i do not care about the {a} of the {d}",
    "any {a} is fine for the {d}",
];
const RELATED_USER: &[&str] = &["i also need a {d} {p}", "can you book a {d} {p} too ?"];
const FILLER_SYSTEM: &[&str] = &["your booking is confirmed .", "is there anything else ?"];
const FILLER_USER: &[&str] = &["thank you very much", "that is all i need", "great , thanks"];

/// Value phrases keyed by slot attribute.
const PHRASES: &[(&str, &[&str])] = &[
    ("name", &["called {v}", "named {v}"]),
    ("area", &["in the {v} area", "in the {v} part of town"]),
    ("food", &["serving {v} food", "that serves {v}"]),
    ("stars", &["with {v} stars", "rated {v} stars"]),
    ("destination", &["going to {v}", "to {v}"]),
    ("departure", &["leaving from {v}", "from {v}"]),
];
const GENERIC_PHRASES: &[&str] = &["with {a} {v}", "where the {a} is {v}"];

/// Coreference phrases for a linked slot, keyed by target attribute; `{s}` is the source domain.
const REFERENCES: &[(&str, &[&str])] = &[
    ("destination", &["to the {s}", "going to the {s}"]),
    ("departure", &["from the {s}", "leaving from the {s}"]),
];
const GENERIC_REFERENCES: &[&str] = &["with the same {a} as the {s}"];

/// Every literal word used by the utterance templates. Ontology values avoid these.
pub fn template_words() -> BTreeSet<String> {
    let lists: [&[&str]; 13] = [
        OPENERS,
        INFORM,
        OFFER_SYSTEM,
        OFFER_USER,
        CHANGE,
        REJECT_SYSTEM,
        REJECT_USER,
        DROP_USER,
        RELATED_USER,
        FILLER_SYSTEM,
        FILLER_USER,
        GENERIC_PHRASES,
        GENERIC_REFERENCES,
    ];
    let keyed = PHRASES.iter().chain(REFERENCES).flat_map(|(_, l)| l.iter());
    lists
        .iter()
        .flat_map(|l| l.iter())
        .chain(keyed)
        .flat_map(|t| t.split_whitespace())
        .filter(|w| !w.starts_with('{'))
        .map(str::to_string)
        .collect()
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn pick<'a>(rng: &mut ChaCha8Rng, list: &[&'a str]) -> &'a str {
    list.choose(rng).copied().unwrap_or("")
}

fn phrase(rng: &mut ChaCha8Rng, slot: &str, value: &str) -> String {
    let attr = Ontology::attribute_of(slot);
    match PHRASES.iter().find(|(a, _)| *a == attr) {
        Some((_, list)) => fill(pick(rng, list), &[("v", value)]),
        None => fill(pick(rng, GENERIC_PHRASES), &[("a", attr), ("v", value)]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhenomenonMix {
    pub deleted_value: f64,
    pub related_slot: f64,
}

impl Default for PhenomenonMix {
    fn default() -> Self {
        Self {
            deleted_value: 0.3,
            related_slot: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRange {
    pub min: usize,
    pub max: usize,
}

impl Default for TurnRange {
    fn default() -> Self {
        Self { min: 3, max: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub count: usize,
    pub mix: PhenomenonMix,
    pub turns: TurnRange,
    pub id_prefix: String,
}

impl GenerateOptions {
    pub fn new(count: usize, mix: PhenomenonMix) -> Self {
        Self {
            count,
            mix,
            turns: TurnRange::default(),
            id_prefix: "dlg".into(),
        }
    }

    fn check(&self) -> Result<(), CorpusError> {
        let PhenomenonMix {
            deleted_value: d,
            related_slot: r,
        } = self.mix;
        if !(0.0..=1.0).contains(&d) || !(0.0..=1.0).contains(&r) || d + r > 1.0 + 1e-12 {
            return Err(CorpusError::Spec(format!(
                "phenomenon mix must be non-negative and sum to at most 1 (got {d} + {r})"
            )));
        }
        if self.turns.min < 2 || self.turns.min > self.turns.max {
            return Err(CorpusError::Spec(format!(
                "turn range {}..={} must satisfy 2 <= min <= max",
                self.turns.min, self.turns.max
            )));
        }
        Ok(())
    }
}

/// Declarative description of a whole corpus, as read by `gen-corpus`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub schema_version: u32,
    pub ontology: OntologySpec,
    pub dialogues: usize,
    pub mix: PhenomenonMix,
    pub turns: TurnRange,
    pub split: SplitSpec,
    /// Minimum fraction of training dialogues carrying each phenomenon.
    pub min_phenomenon_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            schema_version: super::CORPUS_SCHEMA_VERSION,
            ontology: OntologySpec::default(),
            dialogues: 2500,
            mix: PhenomenonMix::default(),
            turns: TurnRange::default(),
            split: SplitSpec::default(),
            min_phenomenon_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Plan {
    Deleted,
    Related,
    Plain,
}

struct Builder<'a> {
    ontology: &'a Ontology,
    rng: &'a mut ChaCha8Rng,
    state: DialogueState,
    turns: Vec<Turn>,
    targets: BTreeSet<&'a str>,
}

impl<'a> Builder<'a> {
    fn opener(&mut self) -> String {
        if self.turns.is_empty() {
            String::new()
        } else {
            pick(self.rng, OPENERS).to_string()
        }
    }

    fn push(&mut self, system: String, user: String) {
        self.turns.push(Turn {
            system,
            user,
            state: self.state.clone(),
        });
    }

    fn random_value(&mut self, slot: &str, avoid: &str) -> String {
        let cands: Vec<&String> = self.ontology.values[slot]
            .iter()
            .skip(1)
            .filter(|v| v.as_str() != avoid)
            .collect();
        cands.choose(self.rng).map(|v| v.to_string()).unwrap_or_default()
    }

    /// Slots that can be set explicitly and later changed, rejected or dropped.
    fn filled_sources(&self) -> Vec<&'a String> {
        self.ontology
            .slots
            .iter()
            .filter(|s| !self.targets.contains(s.as_str()) && self.state.value(s) != NONE)
            .collect()
    }

    fn inform(&mut self, only: Option<&str>) -> bool {
        let slots: Vec<&String> = match only {
            Some(s) => vec![self.ontology.slots.iter().find(|x| *x == s).expect("known slot")],
            None => {
                let open: Vec<&String> = self
                    .ontology
                    .slots
                    .iter()
                    .filter(|s| self.state.value(s) == NONE)
                    .collect();
                let Some(first) = open.choose(self.rng).copied() else {
                    return false;
                };
                let domain = Ontology::domain_of(first);
                let mut picked = vec![first];
                let partners: Vec<&String> = open
                    .iter()
                    .copied()
                    .filter(|s| *s != first && Ontology::domain_of(s) == domain)
                    .collect();
                if let Some(second) = partners.choose(self.rng) {
                    if self.rng.random_bool(0.4) {
                        picked.push(second);
                    }
                }
                picked
            }
        };
        let domain = Ontology::domain_of(slots[0]).to_string();
        let mut parts = Vec::new();
        for slot in slots {
            let current = self.state.value(slot).to_string();
            let value = self.random_value(slot, &current);
            parts.push(phrase(self.rng, slot, &value));
            self.state.set(slot, &value);
        }
        let system = self.opener();
        let user = fill(pick(self.rng, INFORM), &[("d", &domain), ("p", &parts.join(" and "))]);
        self.push(system, user);
        true
    }

    fn offerable(&self) -> Vec<&'a String> {
        self.ontology
            .slots
            .iter()
            .filter(|s| {
                Ontology::attribute_of(s) == "name" && !self.targets.contains(s.as_str()) && self.state.value(s) == NONE
            })
            .collect()
    }

    fn offer(&mut self, only: Option<&str>) -> bool {
        let slot = match only {
            Some(s) => s.to_string(),
            None => match self.offerable().choose(self.rng) {
                Some(s) => s.to_string(),
                None => return false,
            },
        };
        let domain = Ontology::domain_of(&slot).to_string();
        let current = self.state.value(&slot).to_string();
        let value = self.random_value(&slot, &current);
        self.state.set(&slot, &value);
        let system = fill(pick(self.rng, OFFER_SYSTEM), &[("d", &domain), ("v", &value)]);
        let user = pick(self.rng, OFFER_USER).to_string();
        self.push(system, user);
        true
    }

    fn change(&mut self) -> bool {
        let Some(slot) = self.filled_sources().choose(self.rng).map(|s| s.to_string()) else {
            return false;
        };
        let domain = Ontology::domain_of(&slot).to_string();
        let current = self.state.value(&slot).to_string();
        let value = self.random_value(&slot, &current);
        let p = phrase(self.rng, &slot, &value);
        self.state.set(&slot, &value);
        let system = self.opener();
        let user = fill(pick(self.rng, CHANGE), &[("d", &domain), ("p", &p)]);
        self.push(system, user);
        true
    }

    fn filler(&mut self) {
        let system = pick(self.rng, FILLER_SYSTEM).to_string();
        let user = pick(self.rng, FILLER_USER).to_string();
        self.push(system, user);
    }

    fn delete(&mut self) -> bool {
        let Some(slot) = self.filled_sources().choose(self.rng).map(|s| s.to_string()) else {
            return false;
        };
        let domain = Ontology::domain_of(&slot).to_string();
        let attr = Ontology::attribute_of(&slot).to_string();
        self.state.set(&slot, NONE);
        let (system, user) = if attr == "name" {
            (
                fill(pick(self.rng, REJECT_SYSTEM), &[("d", &domain)]),
                fill(pick(self.rng, REJECT_USER), &[("d", &domain)]),
            )
        } else {
            (
                self.opener(),
                fill(pick(self.rng, DROP_USER), &[("d", &domain), ("a", &attr)]),
            )
        };
        self.push(system, user);
        true
    }

    fn relatable(&self) -> Vec<usize> {
        (0..self.ontology.links.len())
            .filter(|&i| {
                let l = &self.ontology.links[i];
                let v = self.state.value(&l.source);
                v != NONE && self.state.value(&l.target) != v
            })
            .collect()
    }

    fn relate(&mut self) -> bool {
        let Some(&i) = self.relatable().choose(self.rng) else {
            return false;
        };
        let link = self.ontology.links[i].clone();
        let value = self.state.value(&link.source).to_string();
        let src_domain = Ontology::domain_of(&link.source);
        let tgt_domain = Ontology::domain_of(&link.target);
        let attr = Ontology::attribute_of(&link.target);
        let p = match REFERENCES.iter().find(|(a, _)| *a == attr) {
            Some((_, list)) => fill(pick(self.rng, list), &[("s", src_domain)]),
            None => fill(pick(self.rng, GENERIC_REFERENCES), &[("a", attr), ("s", src_domain)]),
        };
        self.state.set(&link.target, &value);
        let system = self.opener();
        let user = fill(pick(self.rng, RELATED_USER), &[("d", tgt_domain), ("p", &p)]);
        self.push(system, user);
        true
    }

    fn plain(&mut self) {
        if self.turns.is_empty() {
            if !self.inform(None) {
                self.filler();
            }
            return;
        }
        let roll = self.rng.random_range(0..9);
        let done = match roll {
            0..=4 => self.inform(None),
            5 | 6 => self.offer(None),
            7 => self.change(),
            _ => false,
        };
        if !done {
            self.filler();
        }
    }

    /// Makes the planned phenomenon possible at the next turn.
    fn prepare(&mut self, plan: Plan) {
        match plan {
            Plan::Deleted if self.filled_sources().is_empty() => {
                let choice = self.offerable().choose(self.rng).map(|s| s.to_string());
                match choice {
                    Some(slot) if self.rng.random_bool(0.5) => self.offer(Some(&slot)),
                    _ => self.inform(None),
                };
            }
            Plan::Related if self.relatable().is_empty() => {
                let link = self
                    .ontology
                    .links
                    .choose(self.rng)
                    .expect("ontology has links")
                    .clone();
                if Ontology::attribute_of(&link.source) == "name" && self.rng.random_bool(0.5) {
                    self.offer(Some(&link.source));
                } else {
                    self.inform(Some(&link.source));
                }
            }
            _ => self.plain(),
        }
    }
}

fn build(ontology: &Ontology, plan: Plan, n_turns: usize, rng: &mut ChaCha8Rng) -> Vec<Turn> {
    let key_turn = match plan {
        Plan::Plain => usize::MAX,
        _ => rng.random_range(1..n_turns),
    };
    let mut b = Builder {
        ontology,
        rng,
        state: ontology.empty_state(),
        turns: Vec::with_capacity(n_turns),
        targets: ontology.link_targets(),
    };
    for t in 0..n_turns {
        if t + 1 == key_turn {
            b.prepare(plan);
        } else if t == key_turn {
            let done = match plan {
                Plan::Deleted => b.delete(),
                Plan::Related => b.relate(),
                Plan::Plain => false,
            };
            if !done {
                b.plain();
            }
        } else {
            b.plain();
        }
    }
    b.turns
}

/// Generates `options.count` validated dialogues; phenomenon plans are assigned in exact
/// proportion to the mix and then shuffled.
pub fn generate_dialogues(
    ontology: &Ontology,
    options: &GenerateOptions,
    seed: u64,
) -> Result<Vec<Dialogue>, CorpusError> {
    options.check()?;
    ontology.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = options.count;
    let n_del = (n as f64 * options.mix.deleted_value).round() as usize;
    let n_rel = ((n as f64 * options.mix.related_slot).round() as usize).min(n - n_del);
    let mut plans: Vec<Plan> = std::iter::repeat_n(Plan::Deleted, n_del)
        .chain(std::iter::repeat_n(Plan::Related, n_rel))
        .chain(std::iter::repeat_n(Plan::Plain, n - n_del - n_rel))
        .collect();
    plans.shuffle(&mut rng);

    let mut out = Vec::with_capacity(n);
    for (i, plan) in plans.into_iter().enumerate() {
        let id = format!("{}-{:05}", options.id_prefix, i);
        let mut made = None;
        for _ in 0..64 {
            let n_turns = rng.random_range(options.turns.min..=options.turns.max);
            let turns = build(ontology, plan, n_turns, &mut rng);
            let mut d = Dialogue {
                id: id.clone(),
                tags: Vec::new(),
                turns,
            };
            d.tags = d.detected_tags(ontology);
            let wanted = match plan {
                Plan::Deleted => d.tags.contains(&Phenomenon::DeletedValue),
                Plan::Related => d.tags.contains(&Phenomenon::RelatedSlot),
                Plan::Plain => d.tags.is_empty(),
            };
            if wanted {
                made = Some(d);
                break;
            }
        }
        let d = made.ok_or_else(|| CorpusError::Spec(format!("could not plant a {plan:?} dialogue for {id}")))?;
        d.validate(ontology)
            .unwrap_or_else(|e| panic!("generator produced an invalid dialogue: {e}"));
        out.push(d);
    }
    Ok(out)
}

/// Builds the ontology and a train/dev/test split from `spec`.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<CorpusSplit, CorpusError> {
    if spec.schema_version != super::CORPUS_SCHEMA_VERSION {
        return Err(CorpusError::Spec(format!(
            "unsupported schema_version {}",
            spec.schema_version
        )));
    }
    let SplitSpec { train, dev, test } = spec.split;
    if [train, dev, test].iter().any(|f| *f < 0.0) || ((train + dev + test) - 1.0).abs() > 1e-9 {
        return Err(CorpusError::Spec(
            "split fractions must be non-negative and sum to 1".into(),
        ));
    }
    if spec.dialogues < 10 {
        return Err(CorpusError::Spec("at least 10 dialogues required".into()));
    }
    let ontology = generate_ontology(&spec.ontology, seed)?;
    let options = GenerateOptions {
        count: spec.dialogues,
        mix: spec.mix,
        turns: spec.turns,
        id_prefix: "dlg".into(),
    };
    let mut all = generate_dialogues(&ontology, &options, seed.wrapping_add(1))?;
    let n_train = (spec.dialogues as f64 * train).round() as usize;
    let n_dev = (spec.dialogues as f64 * dev).round() as usize;
    let test_part = all.split_off((n_train + n_dev).min(all.len()));
    let dev_part = all.split_off(n_train);
    let split = CorpusSplit {
        ontology,
        seed,
        train: all,
        dev: dev_part,
        test: test_part,
    };
    for (tag, name) in [
        (Phenomenon::DeletedValue, "deleted_value"),
        (Phenomenon::RelatedSlot, "related_slot"),
    ] {
        let count = split.train.iter().filter(|d| d.tags.contains(&tag)).count();
        let fraction = count as f64 / split.train.len().max(1) as f64;
        if fraction < spec.min_phenomenon_fraction {
            return Err(CorpusError::Spec(format!(
                "train split has {:.1}% {name} dialogues, below the configured minimum {:.1}%",
                100.0 * fraction,
                100.0 * spec.min_phenomenon_fraction
            )));
        }
    }
    split.validate()?;
    Ok(split)
}
