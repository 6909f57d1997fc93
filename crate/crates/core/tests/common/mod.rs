#![allow(dead_code)]

pub mod invariants;

use std::path::PathBuf;

use fpdsc_core::corpus::{load_dialogues, load_ontology, Dialogue, Turn};
use fpdsc_core::ontology::{DialogueState, Ontology, SlotLink, ONTOLOGY_SCHEMA_VERSION};
use fpdsc_core::vocab::Vocabulary;
use fpdsc_core::{Model, ModelConfig, ModelVariant};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn rice_house() -> (Ontology, Dialogue) {
    let ontology = load_ontology(&fixture("ontology.json")).unwrap();
    let mut dialogues = load_dialogues(&fixture("rice_house.jsonl"), &ontology).unwrap();
    (ontology, dialogues.remove(0))
}

/// Two domains, three slots, four candidates per slot (including `none`).
pub fn tiny_ontology() -> Ontology {
    let values = |xs: &[&str]| {
        std::iter::once("none")
            .chain(xs.iter().copied())
            .map(String::from)
            .collect()
    };
    Ontology {
        schema_version: ONTOLOGY_SCHEMA_VERSION,
        domains: vec!["restaurant".into(), "taxi".into()],
        slots: vec![
            "restaurant-name".into(),
            "restaurant-area".into(),
            "taxi-destination".into(),
        ],
        values: [
            (
                "restaurant-name".to_string(),
                values(&["rice house", "golden wok", "kymmoy"]),
            ),
            ("restaurant-area".to_string(), values(&["centre", "north", "south"])),
            (
                "taxi-destination".to_string(),
                values(&["rice house", "golden wok", "kymmoy"]),
            ),
        ]
        .into_iter()
        .collect(),
        links: vec![SlotLink {
            source: "restaurant-name".into(),
            target: "taxi-destination".into(),
        }],
    }
}

pub fn state(ontology: &Ontology, pairs: &[(&str, &str)]) -> DialogueState {
    let mut s = ontology.empty_state();
    for (k, v) in pairs {
        s.set(k, v);
    }
    s
}

/// Two turns: a restaurant request, then a taxi to it.
pub fn tiny_dialogue(ontology: &Ontology) -> Dialogue {
    let d = Dialogue {
        id: "tiny".into(),
        tags: vec![],
        turns: vec![
            Turn {
                system: String::new(),
                user: "book rice house in the north .".into(),
                state: state(
                    ontology,
                    &[("restaurant-name", "rice house"), ("restaurant-area", "north")],
                ),
            },
            Turn {
                system: "done . anything else ?".into(),
                user: "i also need a taxi to the restaurant .".into(),
                state: state(
                    ontology,
                    &[
                        ("restaurant-name", "rice house"),
                        ("restaurant-area", "north"),
                        ("taxi-destination", "rice house"),
                    ],
                ),
            },
        ],
    };
    let mut d = d;
    d.tags = d.detected_tags(ontology);
    d
}

pub fn tiny_config(variant: ModelVariant, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        d: 8,
        heads: 2,
        ff: 12,
        encoder_layers: 1,
        turn_layers: 1,
        dropout: 0.0,
        max_seq_len: 64,
        seed,
    }
}

pub fn tiny_model(variant: ModelVariant, seed: u64) -> (Model, Dialogue) {
    let ontology = tiny_ontology();
    let dialogue = tiny_dialogue(&ontology);
    let vocab = Vocabulary::build(&ontology, std::slice::from_ref(&dialogue));
    let model = Model::new(tiny_config(variant, seed), ontology, vocab).unwrap();
    (model, dialogue)
}
