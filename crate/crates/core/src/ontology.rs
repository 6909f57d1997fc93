//! Slots, candidate values, cross-domain links and dialogue states.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::OntologyError;

/// The value of an unconstrained slot.
pub const NONE: &str = "none";

pub const ONTOLOGY_SCHEMA_VERSION: u32 = 1;

/// Lowercased, trimmed, whitespace-collapsed form used for value comparison.
pub fn canonical(value: &str) -> String {
    value
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotLink {
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ontology {
    pub schema_version: u32,
    pub domains: Vec<String>,
    /// Canonical slot order, `domain-name` form.
    pub slots: Vec<String>,
    /// Candidates per slot; `none` is always first.
    pub values: BTreeMap<String, Vec<String>>,
    pub links: Vec<SlotLink>,
}

impl Ontology {
    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_index(&self, slot: &str) -> Result<usize, OntologyError> {
        self.slots
            .iter()
            .position(|s| s == slot)
            .ok_or_else(|| OntologyError::UnknownSlot(slot.to_string()))
    }

    pub fn candidates(&self, slot: &str) -> Result<&[String], OntologyError> {
        self.values
            .get(slot)
            .map(Vec::as_slice)
            .ok_or_else(|| OntologyError::UnknownSlot(slot.to_string()))
    }

    pub fn value_index(&self, slot: &str, value: &str) -> Result<usize, OntologyError> {
        let canon = canonical(value);
        self.candidates(slot)?
            .iter()
            .position(|v| *v == canon)
            .ok_or_else(|| OntologyError::UnknownValue {
                slot: slot.to_string(),
                value: value.to_string(),
            })
    }

    pub fn domain_of(slot: &str) -> &str {
        slot.split_once('-').map_or(slot, |(d, _)| d)
    }

    /// The part of a slot name after the domain.
    pub fn attribute_of(slot: &str) -> &str {
        slot.split_once('-').map_or(slot, |(_, a)| a)
    }

    pub fn slots_in(&self, domain: &str) -> impl Iterator<Item = &String> + '_ {
        let domain = domain.to_string();
        self.slots.iter().filter(move |s| Self::domain_of(s) == domain)
    }

    pub fn link_targets(&self) -> BTreeSet<&str> {
        self.links.iter().map(|l| l.target.as_str()).collect()
    }

    pub fn empty_state(&self) -> DialogueState {
        DialogueState(self.slots.iter().map(|s| (s.clone(), NONE.to_string())).collect())
    }

    /// Checks the structural invariants of a loaded or generated ontology.
    pub fn validate(&self) -> Result<(), OntologyError> {
        if self.schema_version != ONTOLOGY_SCHEMA_VERSION {
            return Err(OntologyError::SchemaVersion(self.schema_version));
        }
        for slot in &self.slots {
            let cands = self.candidates(slot)?;
            if cands.first().map(String::as_str) != Some(NONE) {
                return Err(OntologyError::Invalid(format!("slot {slot} must list `none` first")));
            }
            let unique: BTreeSet<_> = cands.iter().collect();
            if unique.len() != cands.len() {
                return Err(OntologyError::Invalid(format!("slot {slot} has duplicate values")));
            }
            if !self.domains.iter().any(|d| d == Self::domain_of(slot)) {
                return Err(OntologyError::Invalid(format!("slot {slot} has an unknown domain")));
            }
        }
        if self.values.len() != self.slots.len() {
            return Err(OntologyError::Invalid("values listed for undeclared slots".into()));
        }
        for link in &self.links {
            let src: BTreeSet<_> = self.candidates(&link.source)?.iter().skip(1).collect();
            let tgt: BTreeSet<_> = self.candidates(&link.target)?.iter().skip(1).collect();
            if src.is_disjoint(&tgt) {
                return Err(OntologyError::Invalid(format!(
                    "linked slots {} and {} share no values",
                    link.source, link.target
                )));
            }
        }
        Ok(())
    }
}

/// Slot → value assignment at one turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct DialogueState(pub BTreeMap<String, String>);

impl DialogueState {
    pub fn get(&self, slot: &str) -> Option<&str> {
        self.0.get(slot).map(String::as_str)
    }

    pub fn value(&self, slot: &str) -> &str {
        self.get(slot).unwrap_or(NONE)
    }

    pub fn set(&mut self, slot: &str, value: &str) {
        self.0.insert(slot.to_string(), value.to_string());
    }

    /// Errors if any ontology slot is unassigned or any value is outside its candidates.
    pub fn check_complete(&self, ontology: &Ontology) -> Result<(), OntologyError> {
        for slot in &ontology.slots {
            let value = self.get(slot).ok_or_else(|| OntologyError::MissingSlot(slot.clone()))?;
            ontology.value_index(slot, value)?;
        }
        if let Some(extra) = self.0.keys().find(|k| !ontology.slots.contains(k)) {
            return Err(OntologyError::UnknownSlot(extra.clone()));
        }
        Ok(())
    }

    /// True when every slot of `ontology` has the same canonical value in both states.
    pub fn matches(&self, other: &DialogueState, ontology: &Ontology) -> bool {
        ontology
            .slots
            .iter()
            .all(|s| canonical(self.value(s)) == canonical(other.value(s)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub slots: Vec<String>,
}

/// Sizes and links for [`generate_ontology`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OntologySpec {
    pub domains: Vec<DomainSpec>,
    /// Non-`none` candidates per slot.
    pub values: usize,
    pub links: Vec<SlotLink>,
}

impl Default for OntologySpec {
    /// Three domains, eight slots, ten values per slot, two cross-domain links.
    fn default() -> Self {
        let domain = |name: &str, slots: &[&str]| DomainSpec {
            name: name.into(),
            slots: slots.iter().map(|s| s.to_string()).collect(),
        };
        let link = |source: &str, target: &str| SlotLink {
            source: source.into(),
            target: target.into(),
        };
        Self {
            domains: vec![
                domain("restaurant", &["name", "area", "food"]),
                domain("hotel", &["name", "area", "stars"]),
                domain("taxi", &["destination", "departure"]),
            ],
            values: 10,
            links: vec![
                link("restaurant-name", "taxi-destination"),
                link("hotel-name", "taxi-departure"),
            ],
        }
    }
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gr", "kr", "pl", "st", "tr",
    "sh", "ch",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ea"];
const CODAS: &[&str] = &["", "n", "r", "l", "m", "s", "x", "ng", "rt", "nd"];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for i in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
        if i + 1 == syllables {
            w.push_str(CODAS.choose(rng).unwrap());
        }
    }
    w
}

/// Builds an ontology with pseudo-word values, unique across unlinked slots and disjoint from the
/// corpus template vocabulary. Link targets take the union of their sources' value spaces.
pub fn generate_ontology(spec: &OntologySpec, seed: u64) -> Result<Ontology, OntologyError> {
    generate_ontology_reserving(spec, seed, &crate::corpus::template_words())
}

pub(crate) fn generate_ontology_reserving(
    spec: &OntologySpec,
    seed: u64,
    reserved: &BTreeSet<String>,
) -> Result<Ontology, OntologyError> {
    if spec.domains.len() < 2 {
        return Err(OntologyError::SpecTooSmall("at least 2 domains required".into()));
    }
    if let Some(d) = spec.domains.iter().find(|d| d.slots.len() < 2) {
        return Err(OntologyError::SpecTooSmall(format!(
            "domain {} needs at least 2 slots",
            d.name
        )));
    }
    if spec.values < 3 {
        return Err(OntologyError::SpecTooSmall(
            "at least 3 values per slot required".into(),
        ));
    }
    if spec.links.is_empty() {
        return Err(OntologyError::SpecTooSmall(
            "at least one cross-domain link required".into(),
        ));
    }

    let domains: Vec<String> = spec.domains.iter().map(|d| canonical(&d.name)).collect();
    let unique_domains: BTreeSet<_> = domains.iter().collect();
    if unique_domains.len() != domains.len() {
        return Err(OntologyError::Invalid("duplicate domain names".into()));
    }
    let mut slots = Vec::new();
    for d in &spec.domains {
        for s in &d.slots {
            let slot = format!("{}-{}", canonical(&d.name), canonical(s));
            if slots.contains(&slot) {
                return Err(OntologyError::Invalid(format!("duplicate slot {slot}")));
            }
            slots.push(slot);
        }
    }
    for link in &spec.links {
        for s in [&link.source, &link.target] {
            if !slots.contains(s) {
                return Err(OntologyError::UnknownSlot(s.clone()));
            }
        }
        if Ontology::domain_of(&link.source) == Ontology::domain_of(&link.target) {
            return Err(OntologyError::Invalid(format!(
                "link {} -> {} must cross domains",
                link.source, link.target
            )));
        }
    }
    let targets: BTreeSet<&str> = spec.links.iter().map(|l| l.target.as_str()).collect();
    if spec.links.iter().any(|l| targets.contains(l.source.as_str())) {
        return Err(OntologyError::Invalid("link chains are not supported".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used: BTreeSet<String> = reserved.clone();
    used.extend(slots.iter().flat_map(|s| s.split(['-', ' ']).map(str::to_string)));
    used.insert(NONE.to_string());
    let mut values = BTreeMap::new();
    for slot in slots.iter().filter(|s| !targets.contains(s.as_str())) {
        let mut cands = vec![NONE.to_string()];
        while cands.len() <= spec.values {
            let w = pseudo_word(&mut rng);
            if used.insert(w.clone()) {
                cands.push(w);
            }
        }
        values.insert(slot.clone(), cands);
    }
    for target in &targets {
        let mut cands = vec![NONE.to_string()];
        for link in spec.links.iter().filter(|l| l.target == *target) {
            for v in values[&link.source].iter().skip(1) {
                if !cands.contains(v) {
                    cands.push(v.clone());
                }
            }
        }
        values.insert(target.to_string(), cands);
    }

    let ontology = Ontology {
        schema_version: ONTOLOGY_SCHEMA_VERSION,
        domains,
        slots,
        values,
        links: spec.links.clone(),
    };
    ontology.validate()?;
    Ok(ontology)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_shape() {
        let o = generate_ontology(&OntologySpec::default(), 11).unwrap();
        assert_eq!(o.domains.len(), 3);
        assert_eq!(o.slots.len(), 8);
        for s in &o.slots {
            assert_eq!(o.candidates(s).unwrap()[0], NONE);
            assert_eq!(o.candidates(s).unwrap().len(), 11);
        }
        assert_eq!(o.links.len(), 2);
        assert_eq!(
            o.candidates("taxi-destination").unwrap(),
            o.candidates("restaurant-name").unwrap()
        );
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = OntologySpec::default();
        let a = generate_ontology(&spec, 5).unwrap();
        let b = generate_ontology(&spec, 5).unwrap();
        let c = generate_ontology(&spec, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_small_specs() {
        let mut spec = OntologySpec::default();
        spec.values = 2;
        assert!(matches!(
            generate_ontology(&spec, 1),
            Err(OntologyError::SpecTooSmall(_))
        ));
        let mut spec = OntologySpec::default();
        spec.domains.truncate(1);
        assert!(generate_ontology(&spec, 1).is_err());
        let mut spec = OntologySpec::default();
        spec.links.clear();
        assert!(generate_ontology(&spec, 1).is_err());
        let mut spec = OntologySpec::default();
        spec.domains[0].slots.truncate(1);
        assert!(generate_ontology(&spec, 1).is_err());
    }

    #[test]
    fn state_completeness() {
        let o = generate_ontology(&OntologySpec::default(), 11).unwrap();
        let mut s = o.empty_state();
        assert!(s.check_complete(&o).is_ok());
        s.0.remove("hotel-area");
        assert_eq!(
            s.check_complete(&o),
            Err(OntologyError::MissingSlot("hotel-area".into()))
        );
        let mut s = o.empty_state();
        s.set("hotel-area", "nowhere-at-all");
        assert!(matches!(s.check_complete(&o), Err(OntologyError::UnknownValue { .. })));
    }

    #[test]
    fn canonical_forms() {
        assert_eq!(canonical("  Rice   House "), "rice house");
        assert_eq!(Ontology::domain_of("taxi-destination"), "taxi");
        assert_eq!(Ontology::attribute_of("taxi-destination"), "destination");
    }
}
