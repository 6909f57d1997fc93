//! `fpdsc`: generate corpora, train trackers, evaluate them, run probes and export gate traces.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fpdsc_core::evaluation::ProbeKind;
use fpdsc_core::{DecodeMode, EvalMode, ModelVariant, PhasePlan, Preset};

use crate::commands::Failure;
use crate::config::{Settings, OUT_ENV};

#[derive(Debug, Parser)]
#[command(
    name = "fpdsc",
    version,
    about = "Dialogue state tracking with fused previous states"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file with default settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; each run writes into its own timestamped directory below it.
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Fixed run directory name instead of a timestamp.
    #[arg(long, global = true)]
    run_name: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate an ontology and train/dev/test splits.
    GenCorpus {
        /// Corpus spec (TOML); built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a tracker with teacher forcing, then scheduled sampling.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        sampling_prob: Option<f64>,
        /// `both` or `teacher-forcing-only`.
        #[arg(long)]
        phase: Option<PhasePlan>,
        #[arg(long)]
        target_dev_accuracy: Option<f64>,
        #[arg(long)]
        decode: Option<DecodeMode>,
        /// Continue an interrupted run in this directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Joint and per-slot accuracy on a corpus split.
    Eval {
        #[command(flatten)]
        source: TrackerArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        /// Evaluate only this mode; both modes by default.
        #[arg(long)]
        mode: Option<EvalMode>,
        #[arg(long)]
        decode: Option<DecodeMode>,
    },
    /// Deleted-value or related-slot success change rate on a generated probe set.
    Probe {
        #[command(flatten)]
        source: TrackerArgs,
        #[arg(long)]
        probe: Option<ProbeKind>,
        /// Ontology source when no checkpoint is given, and a compatibility check otherwise.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Template dialogues (deleted-value) or dialogues (related-slot).
        #[arg(long)]
        probe_size: Option<usize>,
        #[arg(long)]
        decode: Option<DecodeMode>,
    },
    /// Export per-turn, per-slot gate weights as CSV.
    TraceGates {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        /// Dialogue ids to trace; the whole split when omitted.
        #[arg(long = "dialogue")]
        dialogues: Vec<String>,
        #[arg(long)]
        decode: Option<DecodeMode>,
    },
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// base, turn, passage, dual, no-gate or single.
    #[arg(long)]
    variant: Option<ModelVariant>,
    #[arg(long)]
    preset: Option<Preset>,
}

#[derive(Debug, Args)]
struct TrackerArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use a reference tracker instead of a checkpoint.
    #[arg(long, value_parser = ["gold-echo", "constant-none"])]
    oracle: Option<String>,
}

fn settings_from_flags(cli: &Cli) -> (Settings, Option<String>, Option<PathBuf>) {
    let mut s = Settings {
        seed: cli.common.seed,
        out: cli.common.out.clone(),
        ..Settings::default()
    };
    let mut oracle = None;
    let mut resume = None;
    match &cli.command {
        Command::GenCorpus { spec } => {
            s.command = Some("gen-corpus".into());
            s.spec = spec.clone();
        }
        Command::Train {
            corpus,
            model,
            lr,
            epochs,
            patience,
            batch_size,
            sampling_prob,
            phase,
            target_dev_accuracy,
            decode,
            resume: r,
        } => {
            s.command = Some("train".into());
            s.corpus = corpus.clone();
            s.variant = model.variant;
            s.preset = model.preset;
            s.lr = *lr;
            s.epochs = *epochs;
            s.patience = *patience;
            s.batch_size = *batch_size;
            s.sampling_prob = *sampling_prob;
            s.phase = *phase;
            s.target_dev_accuracy = *target_dev_accuracy;
            s.decode = *decode;
            resume = r.clone();
        }
        Command::Eval {
            source,
            corpus,
            split,
            mode,
            decode,
        } => {
            s.command = Some("eval".into());
            s.checkpoint = source.checkpoint.clone();
            oracle = source.oracle.clone();
            s.corpus = corpus.clone();
            s.split = split.clone();
            s.mode = *mode;
            s.decode = *decode;
        }
        Command::Probe {
            source,
            probe,
            corpus,
            probe_size,
            decode,
        } => {
            s.command = Some("probe".into());
            s.checkpoint = source.checkpoint.clone();
            oracle = source.oracle.clone();
            s.probe = *probe;
            s.corpus = corpus.clone();
            s.probe_size = *probe_size;
            s.decode = *decode;
        }
        Command::TraceGates {
            checkpoint,
            corpus,
            split,
            dialogues,
            decode,
        } => {
            s.command = Some("trace-gates".into());
            s.checkpoint = checkpoint.clone();
            s.corpus = corpus.clone();
            s.split = split.clone();
            s.dialogues = (!dialogues.is_empty()).then(|| dialogues.clone());
            s.decode = *decode;
        }
    }
    (s, oracle, resume)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (flags, oracle, resume) = settings_from_flags(&cli);
    let mut file = Settings::default();
    if let Some(dir) = &resume {
        let recorded = dir.join(commands::RUN_CONFIG_FILE);
        file = Settings::from_file(&recorded).map_err(Failure::Config)?;
    }
    if let Some(path) = &cli.common.config {
        let base = path.parent().map(PathBuf::from).unwrap_or_default();
        file = Settings::from_file(path)
            .map_err(Failure::Config)?
            .anchored(&base)
            .over(file);
    }
    if let (Some(cmd), Some(recorded)) = (&flags.command, &file.command) {
        if cmd != recorded {
            return Err(Failure::Config(anyhow::anyhow!(
                "config file records command `{recorded}`, not `{cmd}`"
            )));
        }
    }
    let settings = flags.over(file);
    let run_dir = match &resume {
        Some(dir) => dir.clone(),
        None => commands::run_dir(&settings, cli.common.run_name.as_deref()),
    };
    match cli.command {
        Command::GenCorpus { .. } => commands::gen_corpus(&settings, &run_dir),
        Command::Train { .. } => commands::train(&settings, &run_dir, resume.is_some()),
        Command::Eval { .. } => commands::eval(&settings, &run_dir, oracle.as_deref()),
        Command::Probe { .. } => commands::probe(&settings, &run_dir, oracle.as_deref()),
        Command::TraceGates { .. } => commands::trace_gates(&settings, &run_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error());
            ExitCode::from(failure.code())
        }
    }
}
