mod common;

use std::collections::BTreeMap;

use common::{rice_house, tiny_config, tiny_model};
use fpdsc_core::corpus::Dialogue;
use fpdsc_core::evaluation::{
    deleted_value_probe, evaluate, export_gate_traces, gate_traces, joint_accuracy, related_slot_probe, ConstantNone,
    GoldEcho, Predictions, StateTracker,
};
use fpdsc_core::ontology::DialogueState;
use fpdsc_core::vocab::Vocabulary;
use fpdsc_core::{DecodeMode, EvalError, EvalMode, Model, ModelError, ModelVariant};

/// Replays fixed predictions per dialogue id.
struct Scripted(BTreeMap<String, Vec<DialogueState>>);

impl StateTracker for Scripted {
    fn track(&self, dialogue: &Dialogue, _mode: EvalMode) -> Result<Vec<DialogueState>, ModelError> {
        Ok(self.0[&dialogue.id].clone())
    }

    fn name(&self) -> String {
        "scripted".into()
    }
}

fn gold(d: &Dialogue) -> Vec<DialogueState> {
    d.turns.iter().map(|t| t.state.clone()).collect()
}

#[test]
fn nine_of_ten_exact_turns_give_point_nine() {
    let (ontology, d) = rice_house();
    let mut dialogues = Vec::new();
    let mut predictions = Predictions::new();
    for i in 0..2 {
        let mut d = d.clone();
        d.id = format!("copy-{i}");
        let mut pred = gold(&d);
        if i == 1 {
            pred[2].set("restaurant-food", "indian");
        }
        predictions.insert(d.id.clone(), pred);
        dialogues.push(d);
    }
    let r = joint_accuracy(&ontology, &predictions, &dialogues, EvalMode::Normal, "c", "v").unwrap();
    assert_eq!(r.turns, 10);
    assert!((r.joint_accuracy - 0.9).abs() < 1e-12);
    assert!((r.slot_accuracy["restaurant-food"] - 0.9).abs() < 1e-12);
    assert_eq!(r.slot_accuracy["restaurant-area"], 1.0);
}

#[test]
fn missing_turns_are_reported() {
    let (ontology, d) = rice_house();
    let mut predictions = Predictions::new();
    predictions.insert(d.id.clone(), gold(&d)[..3].to_vec());
    let err = joint_accuracy(&ontology, &predictions, &[d], EvalMode::Normal, "c", "v").unwrap_err();
    match err {
        EvalError::Coverage(missing) => {
            assert_eq!(missing, vec!["fixture-rice-house#4", "fixture-rice-house#5"])
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn gold_echo_is_perfect_everywhere() {
    let (ontology, d) = rice_house();
    let set = [d];
    for mode in [EvalMode::Normal, EvalMode::TeacherForcing] {
        assert_eq!(
            evaluate(&GoldEcho, &ontology, &set, mode, "fixture")
                .unwrap()
                .joint_accuracy,
            1.0
        );
    }
    let del = deleted_value_probe(&GoldEcho, &ontology, &set).unwrap();
    let rel = related_slot_probe(&GoldEcho, &ontology, &set).unwrap();
    assert_eq!((del.instances, del.success_change_rate), (1, 1.0));
    assert_eq!(rel.success_change_rate, 1.0);
    assert_eq!(del.log[0].turn, 4);
    assert_eq!(del.log[0].slot, "restaurant-name");
    assert_eq!(rel.log[0].turn, 3);
    assert_eq!(rel.log[0].slot, "taxi-destination");
}

#[test]
fn constant_none_never_handles_a_deletion() {
    let (ontology, d) = rice_house();
    let set = [d];
    let r = deleted_value_probe(&ConstantNone(ontology.clone()), &ontology, &set).unwrap();
    assert_eq!(r.success_change_rate, 0.0);
    assert_eq!(
        evaluate(&ConstantNone(ontology.clone()), &ontology, &set, EvalMode::Normal, "")
            .unwrap()
            .joint_accuracy,
        0.0
    );
}

#[test]
fn deletion_needs_the_value_before_and_none_after() {
    let (ontology, d) = rice_house();
    let mut kept = gold(&d);
    kept[3].set("restaurant-name", "rice house");
    let mut never_filled = gold(&d);
    never_filled[2].set("restaurant-name", "none");
    let mut wrong_value = gold(&d);
    wrong_value[2].set("restaurant-name", "golden wok");
    let cases = [(kept, false), (never_filled, false), (wrong_value, true)];
    for (pred, success) in cases {
        let t = Scripted([(d.id.clone(), pred)].into_iter().collect());
        let r = deleted_value_probe(&t, &ontology, std::slice::from_ref(&d)).unwrap();
        assert_eq!(r.log[0].success, success, "{:?}", r.log[0]);
    }
}

#[test]
fn related_slot_needs_the_exact_value() {
    let (ontology, d) = rice_house();
    let mut pred = gold(&d);
    pred[2].set("taxi-destination", "golden wok");
    let t = Scripted([(d.id.clone(), pred)].into_iter().collect());
    let r = related_slot_probe(&t, &ontology, std::slice::from_ref(&d)).unwrap();
    assert!(r.log.iter().any(|i| i.turn == 3 && !i.success));
}

#[test]
fn probe_without_instances_is_an_error() {
    let (model, d) = tiny_model(ModelVariant::Base, 0);
    let mut plain = d;
    plain.turns.truncate(1);
    let err = deleted_value_probe(&GoldEcho, &model.ontology, &[plain]).unwrap_err();
    assert!(matches!(err, EvalError::EmptyProbe(_)));
}

#[test]
fn gate_traces_cover_every_turn_slot_and_gate() {
    let (ontology, d) = rice_house();
    let vocab = Vocabulary::build(&ontology, std::slice::from_ref(&d));
    let model = Model::new(tiny_config(ModelVariant::DualLevel, 4), ontology, vocab).unwrap();
    let records = gate_traces(&model, std::slice::from_ref(&d), DecodeMode::Argmax).unwrap();
    assert_eq!(records.len(), 5 * 4 * 3);
    assert!(records.iter().all(|r| r.weight > 0.0 && r.weight < 1.0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gates.csv");
    let rows = export_gate_traces(&model, std::slice::from_ref(&d), DecodeMode::Argmax, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "dialogue_id,turn,slot,gate_name,weight");
    assert_eq!(text.lines().count(), rows + 1);
}

#[test]
fn base_model_has_no_gates_to_trace() {
    let (model, d) = tiny_model(ModelVariant::Base, 0);
    assert!(matches!(
        gate_traces(&model, &[d], DecodeMode::Argmax),
        Err(EvalError::NoGates(_))
    ));
}
