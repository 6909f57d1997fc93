use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_SPEC: &str = r#"
dialogues = 40

[ontology]
values = 8
domains = [
    { name = "restaurant", slots = ["name", "area"] },
    { name = "taxi", slots = ["destination", "departure"] },
]
links = [{ source = "restaurant-name", target = "taxi-destination" }]

[turns]
min = 2
max = 4
"#;

fn fpdsc(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpdsc"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("FPDSC_OUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {stdout}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn small_corpus(root: &Path, name: &str, seed: &str) -> PathBuf {
    let spec = root.join("spec.toml");
    fs::write(&spec, SMALL_SPEC).unwrap();
    ok(&fpdsc(
        root,
        &[
            "gen-corpus",
            "--spec",
            spec.to_str().unwrap(),
            "--seed",
            seed,
            "--run-name",
            name,
        ],
    ));
    root.join(name)
}

fn train_small(root: &Path, corpus: &Path, name: &str, variant: &str) -> PathBuf {
    ok(&fpdsc(
        root,
        &[
            "train",
            "--corpus",
            corpus.to_str().unwrap(),
            "--variant",
            variant,
            "--epochs",
            "1",
            "--batch-size",
            "4",
            "--seed",
            "3",
            "--run-name",
            name,
        ],
    ));
    root.join(name)
}

#[test]
fn gen_corpus_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let a = small_corpus(root.path(), "a", "5");
    let b = small_corpus(root.path(), "b", "5");
    let c = small_corpus(root.path(), "c", "6");
    for file in ["ontology.json", "corpus.json", "train.jsonl", "dev.jsonl", "test.jsonl"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    assert_ne!(
        fs::read(a.join("train.jsonl")).unwrap(),
        fs::read(c.join("train.jsonl")).unwrap()
    );
    let config = fs::read_to_string(a.join("run_config.toml")).unwrap();
    assert!(config.contains("command = \"gen-corpus\""));
    assert!(config.contains("seed = 5"));
}

#[test]
fn default_spec_writes_the_full_corpus() {
    let root = tempfile::tempdir().unwrap();
    let out = ok(&fpdsc(root.path(), &["gen-corpus", "--run-name", "default"]));
    assert!(out.contains("wrote 2000 train, 250 dev, 250 test dialogues"), "{out}");
    let ontology = fs::read_to_string(root.path().join("default/ontology.json")).unwrap();
    assert!(ontology.contains("taxi-destination"));
}

#[test]
fn spec_without_values_names_the_field() {
    let root = tempfile::tempdir().unwrap();
    let spec = root.path().join("bad.toml");
    fs::write(&spec, SMALL_SPEC.replace("values = 8\n", "")).unwrap();
    let out = fpdsc(root.path(), &["gen-corpus", "--spec", spec.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing field `values`"), "{}", stderr(&out));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("run.toml");
    fs::write(&config, "learning_rate = 0.1\n").unwrap();
    let out = fpdsc(root.path(), &["--config", config.to_str().unwrap(), "gen-corpus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let root = tempfile::tempdir().unwrap();
    let spec = root.path().join("spec.toml");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let config = root.path().join("run.toml");
    fs::write(&config, "command = \"gen-corpus\"\nseed = 8\nspec = \"spec.toml\"\n").unwrap();
    let c = config.to_str().unwrap();
    ok(&fpdsc(
        root.path(),
        &["--config", c, "gen-corpus", "--run-name", "from-file"],
    ));
    ok(&fpdsc(
        root.path(),
        &["--config", c, "gen-corpus", "--seed", "9", "--run-name", "flag"],
    ));
    let recorded = |name: &str| fs::read_to_string(root.path().join(name).join("run_config.toml")).unwrap();
    assert!(recorded("from-file").contains("seed = 8"));
    assert!(recorded("flag").contains("seed = 9"));
    let out = fpdsc(root.path(), &["--config", c, "train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_probe_and_trace_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let corpus = small_corpus(r, "corpus", "1");
    let run = train_small(r, &corpus, "run", "dual");
    for file in [
        "run_config.toml",
        "metrics.jsonl",
        "best.ckpt",
        "last.ckpt",
        "summary.json",
    ] {
        assert!(run.join(file).exists(), "{file}");
    }
    assert_eq!(
        fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(),
        2
    );

    let ckpt = run.join("best.ckpt");
    let (c, k) = (corpus.to_str().unwrap(), ckpt.to_str().unwrap());
    ok(&fpdsc(
        r,
        &["eval", "--checkpoint", k, "--corpus", c, "--run-name", "eval"],
    ));
    let normal = fs::read_to_string(r.join("eval/eval_normal.json")).unwrap();
    assert!(normal.contains("\"joint_accuracy\""));
    assert!(r.join("eval/eval_teacher_forcing.json").exists());

    let out = ok(&fpdsc(
        r,
        &[
            "probe",
            "--checkpoint",
            k,
            "--probe",
            "deleted-value",
            "--probe-size",
            "5",
        ],
    ));
    assert!(out.starts_with("run directory"), "{out}");

    ok(&fpdsc(
        r,
        &["trace-gates", "--checkpoint", k, "--corpus", c, "--run-name", "gates"],
    ));
    let csv = fs::read_to_string(r.join("gates/gate_traces.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "dialogue_id,turn,slot,gate_name,weight");
    assert!(csv.lines().count() > 1);

    let out = fpdsc(
        r,
        &["trace-gates", "--checkpoint", k, "--corpus", c, "--dialogue", "nope"],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn resume_extends_a_finished_run() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let corpus = small_corpus(r, "corpus", "2");
    let run = train_small(r, &corpus, "run", "turn");
    let out = ok(&fpdsc(
        r,
        &["train", "--resume", run.to_str().unwrap(), "--epochs", "2"],
    ));
    assert!(out.contains("best dev joint accuracy"), "{out}");
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let phases: Vec<bool> = metrics.lines().map(|l| l.contains("\"scheduled_sampling\"")).collect();
    assert_eq!(phases, [false, true, true]);
    let config = fs::read_to_string(run.join("run_config.toml")).unwrap();
    assert!(
        config.contains("epochs = 2") && config.contains("variant = \"turn_level\""),
        "{config}"
    );
}

#[test]
fn oracles_anchor_the_metrics() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let corpus = small_corpus(r, "corpus", "4");
    let c = corpus.to_str().unwrap();
    let out = ok(&fpdsc(
        r,
        &["eval", "--oracle", "gold-echo", "--corpus", c, "--split", "test"],
    ));
    assert_eq!(out.matches("\"joint_accuracy\":1.0").count(), 2, "{out}");
    for probe in ["deleted-value", "related-slot"] {
        let out = ok(&fpdsc(
            r,
            &[
                "probe",
                "--oracle",
                "gold-echo",
                "--corpus",
                c,
                "--probe",
                probe,
                "--probe-size",
                "6",
            ],
        ));
        assert!(out.trim_end().ends_with("= 1.0000"), "{out}");
    }
    let out = ok(&fpdsc(
        r,
        &[
            "probe",
            "--oracle",
            "constant-none",
            "--corpus",
            c,
            "--probe",
            "deleted-value",
            "--probe-size",
            "6",
        ],
    ));
    assert!(out.contains(" 0/") && out.trim_end().ends_with("= 0.0000"), "{out}");
}

#[test]
fn checkpoint_for_another_ontology_is_refused() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let corpus = small_corpus(r, "corpus", "1");
    let run = train_small(r, &corpus, "run", "base");
    let other = r.join("other");
    ok(&fpdsc(r, &["gen-corpus", "--run-name", "other"]));
    let out = fpdsc(
        r,
        &[
            "eval",
            "--checkpoint",
            run.join("best.ckpt").to_str().unwrap(),
            "--corpus",
            other.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    let out = fpdsc(
        r,
        &[
            "trace-gates",
            "--checkpoint",
            run.join("best.ckpt").to_str().unwrap(),
            "--corpus",
            corpus.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn corrupt_checkpoint_and_missing_flags_fail_cleanly() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let corpus = small_corpus(r, "corpus", "1");
    let bad = r.join("bad.ckpt");
    fs::write(&bad, b"FPDSCCKP garbage").unwrap();
    let out = fpdsc(
        r,
        &[
            "eval",
            "--checkpoint",
            bad.to_str().unwrap(),
            "--corpus",
            corpus.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    let out = fpdsc(r, &["eval", "--corpus", corpus.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--checkpoint"));
    let out = fpdsc(
        r,
        &[
            "eval",
            "--checkpoint",
            r.join("absent").to_str().unwrap(),
            "--corpus",
            corpus.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn undersized_ontology_is_a_config_error() {
    let root = tempfile::tempdir().unwrap();
    let spec = root.path().join("small.toml");
    fs::write(
        &spec,
        SMALL_SPEC.replace("[\"destination\", \"departure\"]", "[\"destination\"]"),
    )
    .unwrap();
    let out = fpdsc(root.path(), &["gen-corpus", "--spec", spec.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}
