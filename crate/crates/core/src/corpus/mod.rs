//! Dialogue corpora: data model, validation, synthetic generation, probe augmentation and
//! JSON-lines persistence.

mod augment;
mod generate;
mod io;

pub use augment::{augment_deleted_value, build_deleted_value_probe, build_related_slot_probe};
pub use generate::{
    generate_corpus, generate_dialogues, template_words, CorpusSpec, GenerateOptions, PhenomenonMix, SplitSpec,
    TurnRange,
};
pub use io::{load_corpus, load_dialogues, load_ontology, save_corpus, save_dialogues, save_ontology};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::CorpusError;
use crate::ontology::{canonical, DialogueState, Ontology, NONE};
use crate::vocab::tokenize;

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phenomenon {
    DeletedValue,
    RelatedSlot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub system: String,
    pub user: String,
    /// Gold state after this turn.
    pub state: DialogueState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub tags: Vec<Phenomenon>,
    pub turns: Vec<Turn>,
}

/// A slot whose value was withdrawn: non-`none` before `turn`, `none` at `turn`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeletionEvent {
    pub turn: usize,
    pub slot: String,
    pub deleted: String,
}

/// A linked slot filled by carrying over another slot's value without naming it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelatedEvent {
    pub turn: usize,
    pub source: String,
    pub target: String,
    pub value: String,
}

impl Dialogue {
    /// Gold state entering turn `t` (the all-`none` state for the first turn).
    pub fn state_before(&self, t: usize, ontology: &Ontology) -> DialogueState {
        if t == 0 {
            ontology.empty_state()
        } else {
            self.turns[t - 1].state.clone()
        }
    }

    /// Gold previous states, one per turn.
    pub fn gold_previous_states(&self, ontology: &Ontology) -> Vec<DialogueState> {
        (0..self.turns.len()).map(|t| self.state_before(t, ontology)).collect()
    }

    pub fn deletion_events(&self, ontology: &Ontology) -> Vec<DeletionEvent> {
        let mut out = Vec::new();
        for t in 1..self.turns.len() {
            let (prev, cur) = (&self.turns[t - 1].state, &self.turns[t].state);
            for slot in &ontology.slots {
                if prev.value(slot) != NONE && cur.value(slot) == NONE {
                    out.push(DeletionEvent {
                        turn: t,
                        slot: slot.clone(),
                        deleted: prev.value(slot).to_string(),
                    });
                }
            }
        }
        out
    }

    pub fn related_events(&self, ontology: &Ontology) -> Vec<RelatedEvent> {
        let mut out = Vec::new();
        for t in 0..self.turns.len() {
            let prev = self.state_before(t, ontology);
            let cur = &self.turns[t].state;
            let user = tokenize(&self.turns[t].user);
            for link in &ontology.links {
                let value = cur.value(&link.target);
                if value == NONE || value == prev.value(&link.target) || value != prev.value(&link.source) {
                    continue;
                }
                if !contains_tokens(&user, &tokenize(value)) {
                    out.push(RelatedEvent {
                        turn: t,
                        source: link.source.clone(),
                        target: link.target.clone(),
                        value: value.to_string(),
                    });
                }
            }
        }
        out
    }

    pub fn detected_tags(&self, ontology: &Ontology) -> Vec<Phenomenon> {
        let mut tags = Vec::new();
        if !self.deletion_events(ontology).is_empty() {
            tags.push(Phenomenon::DeletedValue);
        }
        if !self.related_events(ontology).is_empty() {
            tags.push(Phenomenon::RelatedSlot);
        }
        tags
    }

    /// Checks every dialogue invariant against `ontology`.
    pub fn validate(&self, ontology: &Ontology) -> Result<(), CorpusError> {
        let invalid = |message: String| CorpusError::Invalid {
            id: self.id.clone(),
            message,
        };
        if self.turns.is_empty() {
            return Err(invalid("dialogue has no turns".into()));
        }
        for (t, turn) in self.turns.iter().enumerate() {
            if turn.system.trim().is_empty() && turn.user.trim().is_empty() {
                return Err(invalid(format!("turn {} has no utterances", t + 1)));
            }
            turn.state
                .check_complete(ontology)
                .map_err(|e| invalid(format!("turn {}: {e}", t + 1)))?;
            let prev = self.state_before(t, ontology);
            let mut heard = tokenize(&turn.system);
            heard.push("[SEP]".into());
            heard.extend(tokenize(&turn.user));
            for slot in &ontology.slots {
                let value = turn.state.value(slot);
                if value == NONE || canonical(value) == canonical(prev.value(slot)) {
                    continue;
                }
                let carried = ontology
                    .links
                    .iter()
                    .any(|l| l.target == *slot && canonical(prev.value(&l.source)) == canonical(value));
                if !carried && !contains_tokens(&heard, &tokenize(value)) {
                    return Err(invalid(format!(
                        "turn {}: {slot}={value} is neither mentioned nor carried over",
                        t + 1
                    )));
                }
            }
        }
        let mut sorted = self.tags.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.tags {
            return Err(invalid("tags must be sorted and unique".into()));
        }
        if self.tags.contains(&Phenomenon::DeletedValue) && self.deletion_events(ontology).is_empty() {
            return Err(invalid("tagged deleted_value but no slot returns to none".into()));
        }
        if self.tags.contains(&Phenomenon::RelatedSlot) && self.related_events(ontology).is_empty() {
            return Err(invalid("tagged related_slot but no implicit carry-over turn".into()));
        }
        Ok(())
    }
}

pub(crate) fn contains_tokens(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub ontology: Ontology,
    pub seed: u64,
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

impl CorpusSplit {
    pub fn validate(&self) -> Result<(), CorpusError> {
        self.ontology.validate()?;
        let mut seen = BTreeSet::new();
        for d in self.train.iter().chain(&self.dev).chain(&self.test) {
            d.validate(&self.ontology)?;
            if !seen.insert(d.id.as_str()) {
                return Err(CorpusError::OverlappingSplits(d.id.clone()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{generate_ontology, OntologySpec};

    fn ontology() -> Ontology {
        generate_ontology(&OntologySpec::default(), 3).unwrap()
    }

    fn state(o: &Ontology, pairs: &[(&str, &str)]) -> DialogueState {
        let mut s = o.empty_state();
        for (k, v) in pairs {
            s.set(k, v);
        }
        s
    }

    #[test]
    fn detects_deletion_and_related_turns() {
        let o = ontology();
        let name = o.candidates("restaurant-name").unwrap()[1].clone();
        let d = Dialogue {
            id: "x".into(),
            tags: vec![Phenomenon::DeletedValue, Phenomenon::RelatedSlot],
            turns: vec![
                Turn {
                    system: String::new(),
                    user: format!("i need a restaurant called {name}"),
                    state: state(&o, &[("restaurant-name", &name)]),
                },
                Turn {
                    system: "anything else ?".into(),
                    user: "i also need a taxi to the restaurant".into(),
                    state: state(&o, &[("restaurant-name", &name), ("taxi-destination", &name)]),
                },
                Turn {
                    system: "sorry , that restaurant is fully booked .".into(),
                    user: "please find another restaurant".into(),
                    state: state(&o, &[("taxi-destination", &name)]),
                },
            ],
        };
        d.validate(&o).unwrap();
        assert_eq!(d.deletion_events(&o).len(), 1);
        assert_eq!(d.deletion_events(&o)[0].turn, 2);
        let rel = d.related_events(&o);
        assert_eq!(rel.len(), 1);
        assert_eq!(rel[0].target, "taxi-destination");
        assert_eq!(d.detected_tags(&o), d.tags);
    }

    #[test]
    fn rejects_unexplained_values_and_false_tags() {
        let o = ontology();
        let name = o.candidates("restaurant-name").unwrap()[1].clone();
        let mut d = Dialogue {
            id: "bad".into(),
            tags: vec![],
            turns: vec![Turn {
                system: String::new(),
                user: "i need a restaurant".into(),
                state: state(&o, &[("restaurant-name", &name)]),
            }],
        };
        assert!(d.validate(&o).is_err());
        d.turns[0].user = format!("i need a restaurant called {name}");
        d.validate(&o).unwrap();
        d.tags = vec![Phenomenon::DeletedValue];
        assert!(d.validate(&o).is_err());
    }

    #[test]
    fn missing_slot_is_named() {
        let o = ontology();
        let mut s = o.empty_state();
        s.0.remove("hotel-stars");
        let d = Dialogue {
            id: "m".into(),
            tags: vec![],
            turns: vec![Turn {
                system: String::new(),
                user: "hello".into(),
                state: s,
            }],
        };
        let err = d.validate(&o).unwrap_err().to_string();
        assert!(err.contains("hotel-stars"), "{err}");
    }
}
