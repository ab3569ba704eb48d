//! `ucell`: train, infer, evaluate, adapt, inspect and sweep.

mod commands;
mod config;
mod svg;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    Usage(String),
    /// Failure while running; exit code 1.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ucell_core::Error> for CliError {
    fn from(e: ucell_core::Error) -> Self {
        use ucell_core::Error as E;
        match e {
            E::Config(_) | E::TomlDe(_) | E::UnknownLoraTarget(_) | E::InterceptOutOfRange { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "ucell", version, about = "Recursive transformer cell segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: config `output_dir`, then $UCELL_OUTPUT_ROOT, then ./ucell-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Raise log verbosity (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Only print errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a metrics CSV.
    Train(TrainArgs),
    /// Segment images with a checkpoint.
    Infer(InferArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Few-shot fine-tuning trials from a base checkpoint.
    Adapt(AdaptArgs),
    /// Per-iteration attention entropy, refinement curve and raw fields.
    Inspect(InspectArgs),
    /// Train one model per chunk count and compare.
    Sweep(SweepArgs),
    /// Write a synthetic dataset with a manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of unroll chunks.
    #[arg(long)]
    pub chunks: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Dataset manifest (overrides the config).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Continue from this checkpoint's weights.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image files or directories of images.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Also segment these iterations, e.g. `7,14,21`.
    #[arg(long, value_delimiter = ',')]
    pub intercept: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub dataset_id: usize,
    /// Write raw (dy, dx, fg) fields as float TIFFs.
    #[arg(long)]
    pub dump_fields: bool,
    /// Tile overlap in pixels for large images.
    #[arg(long)]
    pub overlap: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long)]
    pub iou: Option<f64>,
    /// Report file name inside the output directory.
    #[arg(long, default_value = "eval.csv")]
    pub report: PathBuf,
}

#[derive(Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub shots: Option<usize>,
    /// `full` or `lora`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Comma-separated adapter roles (qkv, attn_out, mlp_in, mlp_out, embed, head).
    #[arg(long)]
    pub targets: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Manifest of the shot pool (default: contrast-inverted synthetic data).
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Manifest of held-out images scored before and after.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
}

#[derive(Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image to run (default: one synthetic sample from the config).
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Label map for `--image`, needed by `--curve`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub dataset_id: usize,
    /// Score these iterations and write curve.csv.
    #[arg(long, value_delimiter = ',')]
    pub curve: Option<Vec<usize>>,
    /// Write raw fields of these iterations.
    #[arg(long, value_delimiter = ',')]
    pub dump_fields: Option<Vec<usize>>,
    /// Emit SVG charts next to the CSVs.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',', default_value = "1,3,7")]
    pub chunks: Vec<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub plot: bool,
}

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long)]
    pub size: Option<usize>,
    /// Dark cells on a bright background.
    #[arg(long)]
    pub invert: bool,
}

fn init_logging(common: &Common, configured: &str) {
    let level = if common.quiet {
        log::LevelFilter::Error
    } else {
        let base: log::LevelFilter = configured.parse().unwrap_or(log::LevelFilter::Info);
        match common.verbose {
            0 => base,
            1 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Adapt(a) => commands::adapt(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Synth(a) => commands::synth(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
