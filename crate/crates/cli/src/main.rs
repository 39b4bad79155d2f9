//! `spadnet`: planning, analysis, training, verification and evaluation.
//!
//! Every command writes one JSON report (stdout, or `--report`) and logs to
//! stderr. Exit codes: 0 success, 1 invalid input, 2 runtime failure
//! (including a verification report that did not pass).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "spadnet", version, about = "Spacing-adaptive networks toolkit")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan the per-stage adaptation of a network for an input spacing.
    Plan(PlanArgs),
    /// Minimum-gap analysis of the 3D rotary embedding angles.
    RopeAnalyze(RopeArgs),
    /// Train the soft-token tokenizer on a dataset index or synthetic data.
    TrainTokenizer(TrainTokenizerArgs),
    /// Masked token modeling against a frozen tokenizer checkpoint.
    TrainMim(TrainMimArgs),
    /// Compare analytic gradients with central finite differences.
    GradCheck(GradCheckArgs),
    /// Dice, ASSD and Hausdorff distance between two mask volumes.
    EvalMetrics(EvalMetricsArgs),
    /// Generate a synthetic dataset with an index file.
    SynthData(SynthArgs),
    /// Move depth first, crop to the foreground and bound the plane size.
    Preprocess(PreprocessArgs),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// `s_slice,s_h,s_w` in mm, or `2d`.
    #[arg(long)]
    pub spacing: String,
    /// `unet4` or a JSON file holding an array of base convolution specs.
    #[arg(long, default_value = "unet4")]
    pub stages: String,
    #[arg(long, default_value_t = 1)]
    pub in_channels: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Convention {
    FullDim,
    HalfDim,
}

#[derive(Debug, Args)]
pub struct RopeArgs {
    /// Head width; a multiple of 4.
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    /// `b_x,b_y,b_z`.
    #[arg(long, default_value = "10000,10000,2333")]
    pub bases: String,
    /// 3D grid as `z,x,y`; the 2D reference grid uses z = 1.
    #[arg(long, default_value = "8,16,1")]
    pub grid: String,
    /// Widths for the ratio sweep.
    #[arg(long, default_value = "32,64,128")]
    pub sweep: String,
    #[arg(long, value_enum, default_value_t = Convention::FullDim)]
    pub convention: Convention,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset index (JSON array of `{path, modality}`).
    #[arg(long, conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// Train on this many toy synthetic volumes generated from `--seed`.
    #[arg(long)]
    pub synth: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainTokenizerArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Where to write the trained tokenizer.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Drop the per-step curves from the report.
    #[arg(long)]
    pub summary: bool,
}

#[derive(Debug, Args)]
pub struct TrainMimArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Frozen tokenizer checkpoint providing the targets.
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub summary: bool,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// `all` or one of tensor, spad_conv, tokenizer, mim, rope, selftest.
    #[arg(long, default_value = "all")]
    pub scope: String,
    /// Also run the harness self-test, whose test double has a flipped
    /// gradient sign and must be reported as failing.
    #[arg(long)]
    pub inject_sign_error: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Units {
    Mm,
    Index,
}

#[derive(Debug, Args)]
pub struct EvalMetricsArgs {
    /// Predicted mask volume (`.vol`); nonzero voxels are foreground.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, value_enum, default_value_t = Units::Mm)]
    pub units: Units,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    /// JSON synthetic spec; missing fields take defaults.
    #[arg(long, conflicts_with = "toy")]
    pub spec: Option<PathBuf>,
    /// Use the toy training corpus layout.
    #[arg(long)]
    pub toy: bool,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Axis (0..3) to treat as depth, overriding metadata.
    #[arg(long)]
    pub depth_axis: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    ExitCode::from(commands::run(&cli))
}
