mod common;

use common::{tiny_model, tiny_ontology};
use fpdsc_core::checkpoint::{load, save, Checkpoint, TrainerState, FORMAT_VERSION};
use fpdsc_core::optim::Adam;
use fpdsc_core::{CheckpointError, DecodeMode, EvalMode, ModelVariant, Phase};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample() -> (Checkpoint, fpdsc_core::Model, fpdsc_core::corpus::Dialogue) {
    let (model, dialogue) = tiny_model(ModelVariant::DualLevel, 12);
    let mut adam = Adam::new(&model.store);
    adam.step = 3;
    for m in adam.m.iter_mut().flatten() {
        *m = 0.25;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    rng.random::<u64>();
    let state = TrainerState {
        epoch: 7,
        phase: Phase::ScheduledSampling,
        best_dev: 0.5,
        ..TrainerState::default()
    };
    (Checkpoint::capture(&model, Some(&adam), &rng, state), model, dialogue)
}

#[test]
fn round_trip_is_bit_exact() {
    let (ckpt, model, dialogue) = sample();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&path, &ckpt).unwrap();
    let back = load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), ckpt.to_bytes());
    let restored = back.model().unwrap();
    let prev = dialogue.gold_previous_states(&model.ontology);
    let a = model.forward_dialogue(&dialogue.turns, &prev).unwrap();
    let b = restored.forward_dialogue(&dialogue.turns, &prev).unwrap();
    assert_eq!(a.features, b.features);
    assert_eq!(
        model.predict(&dialogue, EvalMode::Normal, DecodeMode::Argmax).unwrap(),
        restored
            .predict(&dialogue, EvalMode::Normal, DecodeMode::Argmax)
            .unwrap()
    );
    let (_, adam, mut rng, state) = back.into_parts().unwrap();
    assert_eq!(adam.unwrap().step, 3);
    assert_eq!(state.epoch, 7);
    let mut expected = ChaCha8Rng::seed_from_u64(5);
    expected.random::<u64>();
    assert_eq!(rng.random::<u64>(), expected.random::<u64>());
}

#[test]
fn truncated_or_modified_files_are_corrupt() {
    let (ckpt, _, _) = sample();
    let bytes = ckpt.to_bytes();
    for cut in [4, 30, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Corrupt(_))),
            "cut {cut}"
        );
    }
    let mut flipped = bytes.clone();
    let i = bytes.len() - 100;
    flipped[i] ^= 1;
    assert!(matches!(
        Checkpoint::from_bytes(&flipped),
        Err(CheckpointError::Corrupt(_))
    ));
    assert!(matches!(
        Checkpoint::from_bytes(b"not a checkpoint at all, no sir"),
        Err(CheckpointError::Corrupt(_))
    ));
}

#[test]
fn other_format_versions_are_refused() {
    let (ckpt, _, _) = sample();
    let mut bytes = ckpt.to_bytes();
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match Checkpoint::from_bytes(&bytes) {
        Err(CheckpointError::VersionMismatch { found, expected }) => {
            assert_eq!((found, expected), (FORMAT_VERSION + 1, FORMAT_VERSION))
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn ontology_must_match() {
    let (ckpt, _, _) = sample();
    assert!(ckpt.model_for(&tiny_ontology()).is_ok());
    let mut other = tiny_ontology();
    other.values.get_mut("restaurant-area").unwrap().push("west".into());
    assert!(matches!(ckpt.model_for(&other), Err(CheckpointError::OntologyMismatch)));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load(&dir.path().join("absent.ckpt")),
        Err(CheckpointError::Io { .. })
    ));
}
