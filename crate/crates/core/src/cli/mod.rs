//! Command-line surface of the `dsainet` binary.

pub mod commands;
pub mod settings;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use settings::{CliConfig, DataSection};

#[derive(Debug, Parser)]
#[command(name = "dsainet", version, about = "Dual-scale attentive EEG decoding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command that builds a configuration.
#[derive(Debug, Clone, Args, Default)]
pub struct ConfigArgs {
    /// TOML file with [arch], [train], [data] and [ablation] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set arch.embed_dim=48`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub sets: Vec<String>,
    /// Named ablation variant (e.g. single-fine, mean-pool).
    #[arg(long)]
    pub ablation: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every run of a split manifest for every seed.
    Train(TrainArgs),
    /// Score a checkpoint on a data file.
    Eval(EvalArgs),
    /// Report trainable parameters and multiply-accumulates.
    Inspect(InspectArgs),
    /// Export per-channel input-gradient saliency.
    Saliency(SaliencyArgs),
    /// Export attention maps and token weights of one trial.
    AttnExport(AttnArgs),
    /// Generate a synthetic trial file.
    GenData(GenArgs),
    /// Write a subject-independent split manifest.
    Split(SplitArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use this manifest instead of deriving one from [data].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Comma-separated seeds, or a count `n` meaning seeds 0..n.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub protocol: Option<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Only train the first `n` runs of the manifest.
    #[arg(long)]
    pub max_runs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated subject ids; all subjects when absent.
    #[arg(long)]
    pub subjects: Option<String>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Also list every parameter tensor.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub subjects: Option<String>,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Index of the trial in the data file.
    #[arg(long, default_value_t = 0)]
    pub trial: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub subjects: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 250.0)]
    pub sample_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 1.0)]
    pub freq_jitter: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "kfold")]
    pub protocol: String,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> crate::Result<()> {
    match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Inspect(a) => commands::inspect(&a),
        Command::Saliency(a) => commands::saliency(&a),
        Command::AttnExport(a) => commands::attn_export(&a),
        Command::GenData(a) => commands::gen_data(&a),
        Command::Split(a) => commands::split(&a),
    }
}
