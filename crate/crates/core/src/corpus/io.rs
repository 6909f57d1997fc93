use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CorpusSplit, Dialogue, Phenomenon, Turn, CORPUS_SCHEMA_VERSION};
use crate::error::CorpusError;
use crate::ontology::{Ontology, ONTOLOGY_SCHEMA_VERSION};

pub const ONTOLOGY_FILE: &str = "ontology.json";
pub const MANIFEST_FILE: &str = "corpus.json";
pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "dev.jsonl", "test.jsonl"];

#[derive(Serialize)]
struct RecordRef<'a> {
    schema_version: u32,
    id: &'a str,
    tags: &'a [Phenomenon],
    turns: &'a [Turn],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    schema_version: u32,
    id: String,
    tags: Vec<Phenomenon>,
    turns: Vec<Turn>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    seed: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes one dialogue per line.
pub fn save_dialogues(path: &Path, dialogues: &[Dialogue]) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for d in dialogues {
        let record = RecordRef {
            schema_version: CORPUS_SCHEMA_VERSION,
            id: &d.id,
            tags: &d.tags,
            turns: &d.turns,
        };
        let line = serde_json::to_string(&record).map_err(|source| CorpusError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads and validates a JSON-lines dialogue file against `ontology`.
pub fn load_dialogues(path: &Path, ontology: &Ontology) -> Result<Vec<Dialogue>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if record.schema_version != CORPUS_SCHEMA_VERSION {
            return Err(malformed(format!(
                "unsupported schema_version {}",
                record.schema_version
            )));
        }
        let d = Dialogue {
            id: record.id,
            tags: record.tags,
            turns: record.turns,
        };
        d.validate(ontology)?;
        out.push(d);
    }
    Ok(out)
}

pub fn save_ontology(path: &Path, ontology: &Ontology) -> Result<(), CorpusError> {
    let mut text = serde_json::to_string_pretty(ontology).map_err(|source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_ontology(path: &Path) -> Result<Ontology, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let ontology: Ontology = serde_json::from_str(&text).map_err(|source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if ontology.schema_version != ONTOLOGY_SCHEMA_VERSION {
        return Err(crate::error::OntologyError::SchemaVersion(ontology.schema_version).into());
    }
    ontology.validate()?;
    Ok(ontology)
}

fn split_paths(dir: &Path) -> [PathBuf; 3] {
    SPLIT_FILES.map(|f| dir.join(f))
}

/// Writes `ontology.json`, `corpus.json` and one JSON-lines file per split into `dir`.
pub fn save_corpus(dir: &Path, corpus: &CorpusSplit) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    save_ontology(&dir.join(ONTOLOGY_FILE), &corpus.ontology)?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&Manifest {
        schema_version: CORPUS_SCHEMA_VERSION,
        seed: corpus.seed,
    })
    .map_err(|source| CorpusError::Json {
        path: manifest.clone(),
        source,
    })?;
    text.push('\n');
    fs::write(&manifest, text).map_err(io_err(&manifest))?;
    let [train, dev, test] = split_paths(dir);
    save_dialogues(&train, &corpus.train)?;
    save_dialogues(&dev, &corpus.dev)?;
    save_dialogues(&test, &corpus.test)
}

/// Loads a directory written by [`save_corpus`], validating every dialogue.
pub fn load_corpus(dir: &Path) -> Result<CorpusSplit, CorpusError> {
    let ontology = load_ontology(&dir.join(ONTOLOGY_FILE))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| CorpusError::Json {
        path: manifest_path.clone(),
        source,
    })?;
    if manifest.schema_version != CORPUS_SCHEMA_VERSION {
        return Err(CorpusError::Spec(format!(
            "unsupported corpus schema_version {}",
            manifest.schema_version
        )));
    }
    let [train, dev, test] = split_paths(dir);
    let corpus = CorpusSplit {
        train: load_dialogues(&train, &ontology)?,
        dev: load_dialogues(&dev, &ontology)?,
        test: load_dialogues(&test, &ontology)?,
        ontology,
        seed: manifest.seed,
    };
    corpus.validate()?;
    Ok(corpus)
}
