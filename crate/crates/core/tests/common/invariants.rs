//! Randomized gate, fusion and attention invariants shared by the property tests and the
//! acceptance suite.

use fpdsc_core::corpus::{Dialogue, Turn};
use fpdsc_core::ontology::{DialogueState, Ontology};
use fpdsc_core::vocab::Vocabulary;
use fpdsc_core::{Model, ModelVariant, Trainer, TrainingConfig};
use fpdsc_tensor::{AttentionSpec, Graph, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{tiny_config, tiny_dialogue, tiny_ontology};

const WORDS: &[&str] = &[
    "i",
    "need",
    "a",
    "taxi",
    "to",
    "the",
    "restaurant",
    "north",
    "south",
    "centre",
    "rice",
    "house",
    "golden",
    "wok",
    "kymmoy",
    "book",
    "please",
    "no",
    "thanks",
    "zebra",
    "?",
    ".",
    ",",
];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..10);
    (0..n)
        .map(|_| *WORDS.choose(rng).expect("words"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_state(o: &Ontology, rng: &mut ChaCha8Rng) -> DialogueState {
    let mut s = o.empty_state();
    for slot in &o.slots {
        s.set(slot, o.values[slot].choose(rng).expect("values"));
    }
    s
}

pub fn random_dialogue(o: &Ontology, turns: usize, rng: &mut ChaCha8Rng) -> Dialogue {
    Dialogue {
        id: format!("rand-{}", rng.random::<u32>()),
        tags: vec![],
        turns: (0..turns)
            .map(|_| Turn {
                system: sentence(rng),
                user: sentence(rng),
                state: random_state(o, rng),
            })
            .collect(),
    }
}

fn random_model(variant: ModelVariant, seed: u64) -> Model {
    let o = tiny_ontology();
    let vocab = Vocabulary::build(&o, &[tiny_dialogue(&o)]);
    Model::new(tiny_config(variant, seed), o, vocab).expect("tiny model")
}

fn variant() -> impl Strategy<Value = ModelVariant> {
    prop::sample::select(ModelVariant::ALL.to_vec())
}

fn fail(msg: String) -> Result<(), TestCaseError> {
    Err(TestCaseError::fail(msg))
}

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .expect("shape")
}

/// Every gate activation of every variant lies strictly inside (0, 1).
pub fn gates_open((v, seed, turns): (ModelVariant, u64, usize)) -> Result<(), TestCaseError> {
    let model = random_model(v, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = random_dialogue(&model.ontology, turns, &mut rng);
    let prev: Vec<_> = (0..turns).map(|_| random_state(&model.ontology, &mut rng)).collect();
    let out = model
        .forward_dialogue(&d.turns, &prev)
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    for (t, gates) in out.gates.iter().enumerate() {
        for (name, w) in gates {
            if let Some(x) = w.data().iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
                return fail(format!("{v} turn {t} gate {name:?} = {x}"));
            }
        }
    }
    Ok(())
}

/// A sigmoid-gated blend stays elementwise between its two inputs.
pub fn blend_bounded((seed, rows, cols, scale): (u64, usize, usize, f64)) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let logits = g.constant(matrix(&mut rng, rows, cols, 40.0));
    let x = g.constant(matrix(&mut rng, rows, cols, scale));
    let y = g.constant(matrix(&mut rng, rows, cols, scale));
    let gate = g.sigmoid(logits).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let f = g.blend(gate, x, y).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let (xs, ys, fs) = (g.value(x), g.value(y), g.value(f));
    for i in 0..fs.len() {
        let (lo, hi) = (xs[i].min(ys[i]), xs[i].max(ys[i]));
        if !(lo <= fs[i] && fs[i] <= hi) {
            return fail(format!("{} outside [{lo}, {hi}]", fs[i]));
        }
    }
    Ok(())
}

/// Attention probabilities of every query row and head sum to one.
pub fn attention_normalized(
    (seed, heads, groups, qg, kg, scale): (u64, usize, usize, usize, usize, f64),
) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = heads * 2;
    let mut g = Graph::new();
    let q = g.constant(matrix(&mut rng, groups * qg, d, scale));
    let k = g.constant(matrix(&mut rng, groups * kg, d, scale));
    let v = g.constant(matrix(&mut rng, groups * kg, d, 1.0));
    let spec = AttentionSpec {
        heads,
        query_group: qg,
        key_group: kg,
    };
    let out = g
        .attention(q, k, v, spec)
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    let (w, _) = g.attention_weights(out).expect("attention node");
    for row in w.chunks(kg) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-12 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return fail(format!("row {row:?} sums to {s}"));
        }
    }
    Ok(())
}

/// Perturbing the last turn leaves every earlier core feature bit-identical.
pub fn causal((v, seed, turns): (ModelVariant, u64, usize)) -> Result<(), TestCaseError> {
    let model = random_model(v, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let d = random_dialogue(&model.ontology, turns, &mut rng);
    let prev: Vec<_> = (0..turns).map(|_| random_state(&model.ontology, &mut rng)).collect();
    let a = model
        .forward_dialogue(&d.turns, &prev)
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    let mut turns2 = d.turns.clone();
    let last = turns2.last_mut().expect("turns");
    last.user = sentence(&mut rng);
    last.system = sentence(&mut rng);
    let mut prev2 = prev.clone();
    *prev2.last_mut().expect("turns") = random_state(&model.ontology, &mut rng);
    let b = model
        .forward_dialogue(&turns2, &prev2)
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    for t in 0..turns - 1 {
        if a.features[t] != b.features[t] {
            return fail(format!("{v}: turn {t} changed after perturbing turn {}", turns - 1));
        }
    }
    Ok(())
}

/// A training step never moves the fixed encoder.
pub fn frozen_stable((v, seed, p): (ModelVariant, u64, f64)) -> Result<(), TestCaseError> {
    let model = random_model(v, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = random_dialogue(&model.ontology, 2, &mut rng);
    let frozen: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(id, p)| (id, p.tensor.data().to_vec()))
        .collect();
    let config = TrainingConfig {
        batch_size: 1,
        peak_lr: 1e-2,
        warmup_proportion: 0.0,
        seed,
        ..TrainingConfig::default()
    };
    let mut trainer = Trainer::new(model, config).map_err(|e| TestCaseError::fail(e.to_string()))?;
    trainer
        .run_epoch(&[d], p)
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    for (id, before) in frozen {
        if trainer.model.store.get(id).tensor.data() != before.as_slice() {
            return fail(format!("{v}: frozen parameter moved"));
        }
    }
    Ok(())
}

pub fn model_cases() -> impl Strategy<Value = (ModelVariant, u64, usize)> {
    (variant(), any::<u64>(), 1usize..5)
}

pub fn causal_cases() -> impl Strategy<Value = (ModelVariant, u64, usize)> {
    (variant(), any::<u64>(), 2usize..5)
}

pub fn blend_cases() -> impl Strategy<Value = (u64, usize, usize, f64)> {
    (
        any::<u64>(),
        1usize..6,
        1usize..9,
        prop::sample::select(vec![1e-3, 1.0, 1e3]),
    )
}

pub fn attention_cases() -> impl Strategy<Value = (u64, usize, usize, usize, usize, f64)> {
    (
        any::<u64>(),
        1usize..4,
        1usize..4,
        1usize..4,
        1usize..6,
        prop::sample::select(vec![0.1, 1.0, 30.0]),
    )
}

pub fn frozen_cases() -> impl Strategy<Value = (ModelVariant, u64, f64)> {
    (variant(), any::<u64>(), prop::sample::select(vec![0.0, 0.5, 1.0]))
}

/// Runs `trials` cases of each invariant and reports the first failure per invariant.
pub fn run_suite(trials: u32) -> Vec<(&'static str, u32, Result<(), String>)> {
    fn go<S: Strategy>(
        trials: u32,
        strategy: S,
        check: impl Fn(S::Value) -> Result<(), TestCaseError>,
    ) -> (u32, Result<(), String>) {
        let mut runner = TestRunner::new(Config {
            cases: trials,
            failure_persistence: None,
            ..Config::default()
        });
        (trials, runner.run(&strategy, check).map_err(|e| e.to_string()))
    }
    let named = |name, (n, r)| (name, n, r);
    vec![
        named("gate outputs in (0,1)", go(trials, model_cases(), gates_open)),
        named(
            "fused outputs within [min,max]",
            go(trials, blend_cases(), blend_bounded),
        ),
        named(
            "attention weights sum to 1",
            go(trials, attention_cases(), attention_normalized),
        ),
        named("causality", go(trials, causal_cases(), causal)),
        named("frozen encoder bit-stable", go(trials, frozen_cases(), frozen_stable)),
    ]
}
