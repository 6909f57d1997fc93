//! Run configuration: defaults, an optional TOML file and command-line flags, in rising precedence.

use std::path::{Path, PathBuf};

use fpdsc_core::evaluation::ProbeKind;
use fpdsc_core::{DecodeMode, EvalMode, ModelVariant, PhasePlan, Preset};
use serde::{Deserialize, Serialize};

/// Default output root when neither `--out` nor the config file names one.
pub const OUT_ENV: &str = "FPDSC_OUT";

/// Every setting a command can take. Unset keys fall through to the next source.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<ModelVariant>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<EvalMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decode: Option<DecodeMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<PhasePlan>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampling_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_dev_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dialogues: Option<Vec<String>>,
}

macro_rules! overlay {
    ($low:expr, $high:expr, $($field:ident),*) => {
        Settings { $($field: $high.$field.or($low.$field)),* }
    };
}

impl Settings {
    /// `self` wins wherever it has a value.
    pub fn over(self, lower: Settings) -> Settings {
        overlay!(
            lower,
            self,
            command,
            seed,
            out,
            spec,
            corpus,
            checkpoint,
            split,
            variant,
            preset,
            mode,
            decode,
            phase,
            probe,
            probe_size,
            lr,
            epochs,
            patience,
            batch_size,
            sampling_prob,
            target_dev_accuracy,
            dialogues
        )
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Settings> {
        let text =
            std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))
    }

    /// Makes relative paths in a file-loaded config relative to the file's directory.
    pub fn anchored(mut self, base: &Path) -> Settings {
        for p in [&mut self.spec, &mut self.corpus, &mut self.checkpoint, &mut self.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize")
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_root(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant.unwrap_or(ModelVariant::DualLevel)
    }

    pub fn preset(&self) -> Preset {
        self.preset.unwrap_or(Preset::Desk)
    }

    pub fn decode(&self) -> DecodeMode {
        self.decode.unwrap_or_default()
    }

    pub fn split(&self) -> &str {
        self.split.as_deref().unwrap_or("dev")
    }
}
