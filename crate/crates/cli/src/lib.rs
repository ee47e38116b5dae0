//! Command-line pipeline: feature extraction, synthetic data, training,
//! scoring, evaluation, DET curves, score fusion and gradient checks.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spoofnet::Error;

pub mod commands;
pub mod config;
pub mod manifest;
pub mod synth;

#[derive(Debug, Parser)]
#[command(name = "spoofnet", version, about = "LFCC + ResNet speech anti-spoofing pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration (sections: seed, lfcc, model, train, tdcf, synth, paths).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw; overrides the config value.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for extract-features.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Where to write the run manifest instead of the default location.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PartitionArg {
    Train,
    Dev,
    Eval,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute LFCC feature files from 16-bit mono WAV audio.
    ExtractFeatures {
        /// Directory of `<utt_id>.wav` files.
        #[arg(long)]
        audio_dir: Option<PathBuf>,
        /// Restrict extraction to the protocol's utterances.
        #[arg(long)]
        protocol: Option<PathBuf>,
        /// Output directory for `<utt_id>.lfcc`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus (protocol plus feature files).
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_per_class: Option<usize>,
        /// Amplitude of the spoofing artifact.
        #[arg(long)]
        amplitude: Option<f64>,
    },
    /// Train a model with one-class softmax.
    Train {
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Score utterances with a checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PartitionArg::Eval)]
        partition: PartitionArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print EER and min-tDCF of a score file as JSON.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        protocol: Option<PathBuf>,
        /// t-DCF parameter file; defaults to the config's `tdcf` section.
        #[arg(long)]
        tdcf: Option<PathBuf>,
        /// Organizer ASV score file used to set the ASV error rates.
        #[arg(long)]
        asv_scores: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write DET curve points as CSV.
    Det {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        protocol: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average several score files utterance by utterance.
    Fuse {
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Write the per-check results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::ExtractFeatures { .. } => "extract-features",
            Command::SynthData { .. } => "synth-data",
            Command::Train { .. } => "train",
            Command::Score { .. } => "score",
            Command::Evaluate { .. } => "evaluate",
            Command::Det { .. } => "det",
            Command::Fuse { .. } => "fuse",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

/// Runs one command line (without the program name) and returns the exit
/// code: 0 on success, 1 on any error, 2 on a usage error.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let argv: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(std::iter::once("spoofnet".to_string()).chain(argv.iter().cloned())) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::execute(&cli, &argv) {
        Ok(code) => code,
        Err(e) => {
            match &e {
                Error::Fusion { missing } => {
                    eprintln!("error: score sets disagree on {} utterance id(s):", missing.len());
                    for m in missing {
                        eprintln!("  {m}");
                    }
                }
                _ => eprintln!("error: {e}"),
            }
            1
        }
    }
}
