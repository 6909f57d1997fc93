//! Binary checkpoints: a JSON manifest followed by raw parameters and an integrity digest.
//!
//! Layout: `FPDSCCKP`, format version (u32 LE), manifest length (u64 LE), manifest JSON,
//! parameter values (f64 LE in manifest order), optional Adam moments, SHA-256 of all prior bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, ModelError};
use crate::model::{Model, ModelConfig};
use crate::ontology::Ontology;
use crate::optim::Adam;
use crate::trainer::Phase;
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 8] = b"FPDSCCKP";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Training progress stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub epoch: usize,
    pub phase: Phase,
    pub phase_epoch: usize,
    /// The phase stopped early on patience or the target accuracy.
    pub phase_done: bool,
    /// Optimizer steps taken in the current phase.
    pub step: u64,
    pub best_dev: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    pub teacher_forcing_best: f64,
    /// Turns that consumed a model-predicted previous state.
    pub predicted_state_inputs: usize,
}

impl Default for TrainerState {
    fn default() -> Self {
        Self {
            epoch: 0,
            phase: Phase::TeacherForcing,
            phase_epoch: 0,
            phase_done: false,
            step: 0,
            best_dev: 0.0,
            best_epoch: 0,
            epochs_since_best: 0,
            teacher_forcing_best: 0.0,
            predicted_state_inputs: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerManifest {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    vocab: Vocabulary,
    ontology: Ontology,
    state: TrainerState,
    rng: RngState,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerManifest>,
}

/// Everything needed to rebuild a model and continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub ontology: Ontology,
    pub state: TrainerState,
    pub rng: RngState,
    pub params: Vec<ParamEntry>,
    pub values: Vec<Vec<f64>>,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn capture(model: &Model, optimizer: Option<&Adam>, rng: &ChaCha8Rng, state: TrainerState) -> Self {
        let (params, values) = model
            .store
            .iter()
            .map(|(_, p)| {
                let entry = ParamEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    frozen: p.frozen,
                };
                (entry, p.tensor.data().to_vec())
            })
            .unzip();
        Self {
            config: model.config.clone(),
            vocab: model.vocab.clone(),
            ontology: model.ontology.clone(),
            state,
            rng: RngState::capture(rng),
            params,
            values,
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model with the stored weights.
    pub fn model(&self) -> Result<Model, CheckpointError> {
        let mut model = Model::new(self.config.clone(), self.ontology.clone(), self.vocab.clone())
            .map_err(|e: ModelError| CheckpointError::Corrupt(format!("cannot rebuild model: {e}")))?;
        if model.store.len() != self.params.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} parameters stored, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for ((id, entry), values) in ids.into_iter().zip(&self.params).zip(&self.values) {
            let p = model.store.get_mut(id);
            if p.name != entry.name || p.tensor.shape() != entry.shape.as_slice() {
                return Err(CheckpointError::Corrupt(format!(
                    "parameter `{}` does not fit the model",
                    entry.name
                )));
            }
            p.tensor.data_mut().copy_from_slice(values);
        }
        model.refresh_cache();
        Ok(model)
    }

    /// Rebuilds the model and fails unless its ontology equals `ontology`.
    pub fn model_for(&self, ontology: &Ontology) -> Result<Model, CheckpointError> {
        if &self.ontology != ontology {
            return Err(CheckpointError::OntologyMismatch);
        }
        self.model()
    }

    pub fn into_parts(self) -> Result<(Model, Option<Adam>, ChaCha8Rng, TrainerState), CheckpointError> {
        let model = self.model()?;
        Ok((model, self.optimizer, self.rng.restore(), self.state))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            ontology: self.ontology.clone(),
            state: self.state.clone(),
            rng: self.rng,
            params: self.params.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerManifest {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                step: o.step,
            }),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        self.values.iter().for_each(|v| put(v));
        if let Some(opt) = &self.optimizer {
            opt.m.iter().for_each(|v| put(v));
            opt.v.iter().for_each(|v| put(v));
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
            return Err(corrupt("file is truncated"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let manifest_end = 20usize
            .checked_add(len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("manifest length out of range"))?;
        let manifest: Manifest = serde_json::from_slice(&body[20..manifest_end])
            .map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))?;
        let mut rest = &body[manifest_end..];
        let mut take = |n: usize| -> Result<Vec<f64>, CheckpointError> {
            if rest.len() < n * 8 {
                return Err(corrupt("payload shorter than manifest"));
            }
            let (head, tail) = rest.split_at(n * 8);
            rest = tail;
            Ok(head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let sizes: Vec<usize> = manifest.params.iter().map(|p| p.shape.iter().product()).collect();
        let values = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>, _>>()?;
        let optimizer = match &manifest.optimizer {
            Some(o) => {
                let moment = |p: &ParamEntry, n: usize| if p.frozen { 0 } else { n };
                let mut read = || {
                    manifest
                        .params
                        .iter()
                        .zip(&sizes)
                        .map(|(p, &n)| take(moment(p, n)))
                        .collect::<Result<Vec<_>, _>>()
                };
                let m = read()?;
                let v = read()?;
                Some(Adam {
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    step: o.step,
                    m,
                    v,
                })
            }
            None => None,
        };
        if !rest.is_empty() {
            return Err(corrupt("trailing bytes after payload"));
        }
        Ok(Self {
            config: manifest.config,
            vocab: manifest.vocab,
            ontology: manifest.ontology,
            state: manifest.state,
            rng: manifest.rng,
            params: manifest.params,
            values,
            optimizer,
        })
    }
}

/// Writes atomically through a temporary sibling file.
pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&checkpoint.to_bytes()).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rng_state_round_trip() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..37 {
            rng.random::<u32>();
        }
        let mut restored = RngState::capture(&rng).restore();
        assert_eq!(rng.random::<u64>(), restored.random::<u64>());
    }
}
