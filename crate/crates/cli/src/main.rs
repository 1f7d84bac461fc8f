//! `ctp4d`: batch front end for phantom synthesis, preprocessing, training,
//! evaluation and prediction. Exit codes: 0 success, 1 partial failure,
//! 2 usage or configuration error.

mod commands;
mod data;
mod failure;
mod manifest;
mod model;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctp4d_core::metrics::HausdorffMode;
use ctp4d_core::{DType, Group, Precision};

use failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "ctp4d", version = manifest::VERSION, about = "4D CT perfusion stroke segmentation")]
struct Cli {
    /// Worker threads for per-patient and per-sample work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic phantom studies with ground-truth masks.
    Synth(SynthArgs),
    /// Convert, skull-strip, enhance and standardise studies.
    Preprocess(PreprocessArgs),
    /// Train a network on a preprocessed directory.
    Train(TrainArgs),
    /// Score a model against ground truth and write a CSV report.
    Eval(EvalArgs),
    /// Segment one preprocessed study.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Phantom description (JSON); built-in defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of phantoms, seeded seed, seed + 1, ...
    #[arg(long, default_value_t = 1, conflicts_with = "mix")]
    pub count: usize,
    /// Per-cohort counts instead of --count, e.g. `LVO=20,Non-LVO=14,WIS=6`.
    #[arg(long, value_parser = parse_mix)]
    pub mix: Option<Mix>,
    /// Overrides the seed of the phantom description.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the cohort of the phantom description.
    #[arg(long, value_parser = parse_group)]
    pub group: Option<Group>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_he: bool,
    #[arg(long)]
    pub no_gamma: bool,
    #[arg(long)]
    pub no_zscore: bool,
    /// Keep the acquisition schedule instead of resampling to 1 s.
    #[arg(long)]
    pub no_resample: bool,
    /// Seed of the train/validation/test split.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Storage precision of the output (default: that of each input).
    #[arg(long, value_enum)]
    pub storage: Option<StorageArg>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON with optional `network` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint, history and manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Seed of the weight initialisation (default: the training seed).
    #[arg(long)]
    pub init_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Which patients to score.
    #[arg(long, value_enum, default_value_t = SubsetArg::Test)]
    pub subset: SubsetArg,
    #[arg(long, value_enum, default_value_t = HdArg::PerSlice)]
    pub hd: HdArg,
    #[arg(long, default_value_t = 1)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Score the ground truth against itself (sanity check of the report).
    #[arg(long)]
    pub use_ground_truth: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub study: PathBuf,
    /// Output mask file (.ctp4).
    #[arg(long)]
    pub out: PathBuf,
    /// Monte Carlo dropout samples; above 1 a variance file is written too.
    #[arg(long, default_value_t = 1)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for per-slice PNG overlays on the temporal maximum.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    /// Brain mask (.ctp4 label file, 255 outside); otherwise voxels that are zero in every frame are outside.
    #[arg(long)]
    pub brain_mask: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StorageArg {
    F32,
    F64,
}

impl From<StorageArg> for DType {
    fn from(s: StorageArg) -> DType {
        match s {
            StorageArg::F32 => DType::F32,
            StorageArg::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Precision {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum HdArg {
    PerSlice,
    Volume,
}

impl From<HdArg> for HausdorffMode {
    fn from(h: HdArg) -> HausdorffMode {
        match h {
            HdArg::PerSlice => HausdorffMode::PerSlice,
            HdArg::Volume => HausdorffMode::Volume,
        }
    }
}

fn parse_group(s: &str) -> Result<Group, String> {
    s.parse().map_err(|e: ctp4d_core::Error| e.to_string())
}

/// Per-cohort phantom counts.
#[derive(Clone, Debug)]
pub struct Mix(pub Vec<(Group, usize)>);

fn parse_mix(s: &str) -> Result<Mix, String> {
    s.split(',')
        .map(|part| {
            let (g, n) = part
                .split_once('=')
                .ok_or_else(|| format!("expected GROUP=COUNT, got {part:?}"))?;
            let n = n.trim().parse().map_err(|_| format!("bad count in {part:?}"))?;
            Ok((parse_group(g.trim())?, n))
        })
        .collect::<Result<_, String>>()
        .map(Mix)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::usage(format!("cannot size the thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth::run(&a),
        Command::Preprocess(a) => commands::preprocess::run(&a),
        Command::Train(a) => commands::train::run(&a),
        Command::Eval(a) => commands::eval::run(&a),
        Command::Predict(a) => commands::predict::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
