use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{contains_tokens, generate_dialogues, Dialogue, GenerateOptions, Phenomenon, PhenomenonMix, Turn};
use crate::error::CorpusError;
use crate::ontology::{canonical, DialogueState, Ontology};
use crate::vocab::tokenize;

fn replace_tokens(text: &str, from: &[String], to: &str) -> String {
    let tokens = tokenize(text);
    if !contains_tokens(&tokens, from) {
        return text.to_string();
    }
    let mut out: Vec<String> = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i..].starts_with(from) {
            out.push(to.to_string());
            i += from.len();
        } else {
            out.push(tokens[i].clone());
            i += 1;
        }
    }
    out.join(" ")
}

fn mentioned(d: &Dialogue, value: &str) -> bool {
    let needle = tokenize(value);
    d.turns.iter().any(|t| {
        contains_tokens(&tokenize(&t.system), &needle)
            || contains_tokens(&tokenize(&t.user), &needle)
            || t.state.0.values().any(|v| canonical(v) == canonical(value))
    })
}

fn substitute(d: &Dialogue, from: &str, to: &str, id: String, ontology: &Ontology) -> Option<Dialogue> {
    let from_tokens = tokenize(from);
    let mut turns = Vec::with_capacity(d.turns.len());
    for t in &d.turns {
        let mut state = DialogueState::default();
        for (slot, v) in &t.state.0 {
            if canonical(v) == canonical(from) {
                ontology.value_index(slot, to).ok()?;
                state.set(slot, to);
            } else {
                state.set(slot, v);
            }
        }
        turns.push(Turn {
            system: replace_tokens(&t.system, &from_tokens, to),
            user: replace_tokens(&t.user, &from_tokens, to),
            state,
        });
    }
    let mut out = Dialogue {
        id,
        tags: Vec::new(),
        turns,
    };
    out.tags = out.detected_tags(ontology);
    Some(out)
}

/// Instantiates each deleted-value template `substitutions` times, replacing the deleted value
/// with a different candidate of the same slot in every utterance and state.
pub fn augment_deleted_value(
    templates: &[Dialogue],
    ontology: &Ontology,
    substitutions: usize,
    seed: u64,
) -> Result<Vec<Dialogue>, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(templates.len() * substitutions);
    for template in templates {
        let event = template
            .deletion_events(ontology)
            .into_iter()
            .next()
            .filter(|_| template.tags.contains(&Phenomenon::DeletedValue))
            .ok_or_else(|| CorpusError::Invalid {
                id: template.id.clone(),
                message: "template has no deleted-value turn".into(),
            })?;
        let mut pool: Vec<&String> = ontology
            .candidates(&event.slot)?
            .iter()
            .skip(1)
            .filter(|v| !mentioned(template, v))
            .collect();
        pool.shuffle(&mut rng);
        let mut made = 0;
        let mut used = BTreeSet::new();
        for replacement in pool {
            if made == substitutions {
                break;
            }
            let id = format!("{}-sub{made}", template.id);
            let Some(d) = substitute(template, &event.deleted, replacement, id, ontology) else {
                continue;
            };
            if let Err(e) = d.validate(ontology) {
                panic!("value substitution broke dialogue consistency: {e}");
            }
            if !d.tags.contains(&Phenomenon::DeletedValue) || !used.insert(replacement.clone()) {
                continue;
            }
            out.push(d);
            made += 1;
        }
        if made < substitutions {
            return Err(CorpusError::Spec(format!(
                "template {} admits only {made} of {substitutions} substitutions",
                template.id
            )));
        }
    }
    Ok(out)
}

/// A deleted-value probe of `templates × substitutions` dialogues built from freshly planted
/// templates.
pub fn build_deleted_value_probe(
    ontology: &Ontology,
    templates: usize,
    substitutions: usize,
    seed: u64,
) -> Result<Vec<Dialogue>, CorpusError> {
    let mut options = GenerateOptions::new(
        templates,
        PhenomenonMix {
            deleted_value: 1.0,
            related_slot: 0.0,
        },
    );
    options.id_prefix = "probe-del".into();
    let base = generate_dialogues(ontology, &options, seed)?;
    augment_deleted_value(&base, ontology, substitutions, seed.wrapping_add(17))
}

/// Dialogues whose linked slots must be filled by carry-over.
pub fn build_related_slot_probe(ontology: &Ontology, count: usize, seed: u64) -> Result<Vec<Dialogue>, CorpusError> {
    let mut options = GenerateOptions::new(
        count,
        PhenomenonMix {
            deleted_value: 0.0,
            related_slot: 1.0,
        },
    );
    options.id_prefix = "probe-rel".into();
    generate_dialogues(ontology, &options, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{generate_ontology, OntologySpec, NONE};

    #[test]
    fn substitution_rewrites_every_occurrence() {
        let o = generate_ontology(&OntologySpec::default(), 2).unwrap();
        let probe = build_deleted_value_probe(&o, 20, 3, 5).unwrap();
        assert_eq!(probe.len(), 60);
        let templates = {
            let mut opts = GenerateOptions::new(
                20,
                PhenomenonMix {
                    deleted_value: 1.0,
                    related_slot: 0.0,
                },
            );
            opts.id_prefix = "probe-del".into();
            generate_dialogues(&o, &opts, 5).unwrap()
        };
        for (i, d) in probe.iter().enumerate() {
            d.validate(&o).unwrap();
            let t = &templates[i / 3];
            let old = &t.deletion_events(&o)[0].deleted;
            assert!(!mentioned(d, old), "{} still mentions {old}", d.id);
            let ev = &d.deletion_events(&o)[0];
            assert_ne!(&ev.deleted, old);
            assert_eq!(d.turns[ev.turn].state.value(&ev.slot), NONE);
        }
    }

    #[test]
    fn probe_is_deterministic() {
        let o = generate_ontology(&OntologySpec::default(), 2).unwrap();
        assert_eq!(
            build_deleted_value_probe(&o, 10, 2, 1).unwrap(),
            build_deleted_value_probe(&o, 10, 2, 1).unwrap()
        );
    }

    #[test]
    fn non_deletion_templates_are_rejected() {
        let o = generate_ontology(&OntologySpec::default(), 2).unwrap();
        let rel = build_related_slot_probe(&o, 3, 1).unwrap();
        assert!(augment_deleted_value(&rel, &o, 1, 0).is_err());
    }
}
