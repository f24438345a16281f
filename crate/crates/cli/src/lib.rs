//! `la` — command-line front end for the few-shot segmentation toolkit:
//! synthesize datasets, train, evaluate, verify gradients, and audit runs.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 numeric failure
//! (non-finite loss, failed gradient check), 3 I/O or file-format error.

pub mod commands;
pub mod gradchecks;
pub mod manifest;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "la",
    version,
    about = "Few-shot multi-prompt semantic segmentation on the CPU",
    propagate_version = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Dataset management.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a model with episodic few-shot supervision.
    Train(TrainArgs),
    /// Score a segmenter over sampled evaluation episodes.
    Eval(EvalArgs),
    /// Verify analytic gradients of every network block by finite differences.
    Gradcheck(GradcheckArgs),
    /// Summarize and integrity-check a finished run directory.
    Report(ReportArgs),
}

#[derive(Subcommand)]
pub enum DatasetCommand {
    /// Generate a synthetic shape dataset on disk (byte-reproducible).
    Synth(DatasetSynthArgs),
}

#[derive(Args)]
pub struct DatasetSynthArgs {
    /// Number of shape classes (at most 8).
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    /// Number of images.
    #[arg(long, default_value_t = 400)]
    pub images: usize,
    /// Square image side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Minimum distinct classes drawn per image.
    #[arg(long, default_value_t = 1)]
    pub min_shapes: usize,
    /// Maximum distinct classes drawn per image.
    #[arg(long, default_value_t = 3)]
    pub max_shapes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training configuration (JSON). Optional when --resume supplies one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (from `la dataset synth`).
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for metrics, checkpoints, and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an identical configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. --set optimizer.lr_peak=3e-4.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Zero out wall-clock columns so re-runs are byte-identical.
    #[arg(long)]
    pub deterministic: bool,
    /// Suppress progress lines on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to score (repeat once per fold with --cross-validate).
    #[arg(long)]
    pub ckpt: Vec<PathBuf>,
    /// Reference segmenter instead of a checkpoint: 'oracle' or 'constant-bg'.
    #[arg(long)]
    pub model: Option<String>,
    /// Episode way count (classes per episode).
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Episode shot count (support examples per class).
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Prompt mode: random, masks, boxes, points, or boxes_and_points.
    #[arg(long, default_value = "masks")]
    pub prompts: String,
    /// Episodes per seed.
    #[arg(long, default_value_t = 200)]
    pub episodes: usize,
    /// Number of evaluation seeds, used as 0..N.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    /// Explicit comma-separated seeds (overrides --seeds).
    #[arg(long)]
    pub seed_list: Option<String>,
    /// Fold whose split to evaluate (requires --split seen or unseen).
    #[arg(long)]
    pub fold: Option<u32>,
    #[arg(long, default_value_t = 4)]
    pub num_folds: u32,
    /// Class pool: unseen, seen, or all.
    #[arg(long, default_value = "unseen")]
    pub split: String,
    /// Control arm: support prompts are swapped to wrong classes.
    #[arg(long)]
    pub control: bool,
    /// Score each support example separately instead of pooled prototypes.
    #[arg(long)]
    pub per_example: bool,
    /// Evaluate several way counts in one run, e.g. --n-sweep 1,2,4.
    #[arg(long)]
    pub n_sweep: Option<String>,
    /// Score one checkpoint per fold on that fold's unseen classes.
    #[arg(long)]
    pub cross_validate: bool,
    /// Ablation axes to retrain and score (comma list or 'all').
    #[arg(long)]
    pub ablation: Option<String>,
    /// Training configuration for --ablation retraining.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a field of the --ablation training config by dotted path.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Evaluation worker threads (default: available parallelism).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Single-threaded, no wall-clock fields: byte-identical re-runs.
    #[arg(long)]
    pub deterministic: bool,
    /// Run directory for reports and the manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Maximum allowed relative error between analytic and numeric gradients.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Central-difference step size.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Negate analytic gradients to prove the checker detects faults
    /// (exit 0 when every block fails, as it must).
    #[arg(long)]
    pub inject_sign_flip: bool,
    /// Seed for parameters and activations.
    #[arg(long, default_value_t = 12)]
    pub seed: u64,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Run directory containing a manifest.json.
    #[arg(long)]
    pub run: PathBuf,
}

/// Parse argv, dispatch, and map the outcome to a process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    let ctx = commands::Ctx { argv };
    let result = match &cli.command {
        Command::Dataset(DatasetCommand::Synth(a)) => commands::cmd_dataset_synth(&ctx, a),
        Command::Train(a) => commands::cmd_train(&ctx, a),
        Command::Eval(a) => commands::cmd_eval(&ctx, a),
        Command::Gradcheck(a) => commands::cmd_gradcheck(a),
        Command::Report(a) => commands::cmd_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}
