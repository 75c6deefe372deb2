//! `blg` command-line front end.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "blg", version, about = "Depth-conditioned bokeh synthesis: training, inference and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a generator (pretraining, then adversarial refinement).
    Train(TrainArgs),
    /// Render a bokeh image from a checkpoint.
    Infer(InferArgs),
    /// Report mean PSNR and SSIM of a checkpoint over a split.
    Eval(EvalArgs),
    /// Produce a blur-cue map for an image.
    Depth(DepthArgs),
    /// Write a synthetic paired dataset and its manifest.
    Synth(SynthArgs),
}

/// Flags shared by every command.
#[derive(Debug, Args)]
pub struct Common {
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run all kernels on one thread (bitwise-reproducible across machines)
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct DepthFlags {
    /// Blur-cue source: precomputed_file, synthetic_gradient or external_command [default: precomputed_file]
    #[arg(long)]
    pub depth_kind: Option<String>,
    /// Depth tool invoked as `<tool> <image> <output>`; implies external_command [default: none]
    #[arg(long)]
    pub depth_command: Option<String>,
    /// Depth normalization: minmax or fixed_range [default: minmax]
    #[arg(long)]
    pub depth_normalization: Option<String>,
    /// Stored-value convention: disparity (larger = nearer) or depth [default: disparity]
    #[arg(long)]
    pub depth_convention: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file of `key = value` lines [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set generator.width=4`; repeatable [default: none]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory [default: $BLG_OUTPUT_DIR/train or blg-out/train]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset manifest CSV (id,input,target,depth,split) [default: none]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Number of synthetic training pairs, used without a manifest [default: 16]
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Side length of synthetic pairs [default: 64]
    #[arg(long)]
    pub size: Option<usize>,
    /// Number of synthetic validation pairs [default: 4]
    #[arg(long)]
    pub val_count: Option<usize>,
    /// Pretrain and refine epochs as `A,B` [default: 60,60]
    #[arg(long)]
    pub epochs: Option<String>,
    /// Batch size [default: 2]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate of generator and critic [default: 0.0001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Generator width (4, 8 and 12 are the reference presets) [default: 8]
    #[arg(long)]
    pub width: Option<usize>,
    /// Training crop size; clamped to the synthetic size [default: 1024]
    #[arg(long)]
    pub crop: Option<usize>,
    /// Steps per epoch; 0 means one pass over the training pairs [default: 0]
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Checkpoint every N steps; 0 saves only at stage ends [default: 0]
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Disable the edge and background-blur terms of pretraining
    #[arg(long)]
    pub no_bokeh_loss: bool,
    /// Resume from a training checkpoint [default: none]
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub depth: DepthFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Generator or training checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input RGB image
    #[arg(long)]
    pub input: PathBuf,
    /// Depth map for the input; otherwise the configured depth source runs [default: none]
    #[arg(long)]
    pub depth: Option<PathBuf>,
    /// Output image [default: $BLG_OUTPUT_DIR/infer/<input name>.png]
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Config file whose generator settings the checkpoint must match [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub depth_flags: DepthFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generator or training checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest CSV [default: none]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split to evaluate [default: val]
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Evaluate on this many synthetic pairs instead of a manifest [default: 0]
    #[arg(long, default_value_t = 0)]
    pub synthetic: usize,
    /// Side length of synthetic pairs [default: 64]
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// What to score against the targets: model, input or target [default: model]
    #[arg(long, default_value = "model")]
    pub predict: String,
    /// Per-sample report CSV [default: $BLG_OUTPUT_DIR/eval/report.csv]
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub depth_flags: DepthFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct DepthArgs {
    /// Input image
    #[arg(long)]
    pub input: PathBuf,
    /// Output 16-bit grayscale PNG [default: $BLG_OUTPUT_DIR/depth/<input name>.png]
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Existing depth file to normalize and resize to the input [default: none]
    #[arg(long)]
    pub depth: Option<PathBuf>,
    #[command(flatten)]
    pub depth_flags: DepthFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of training pairs [default: 16]
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Number of validation pairs [default: 4]
    #[arg(long, default_value_t = 4)]
    pub val_count: usize,
    /// Side length (multiple of 16) [default: 64]
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Output directory [default: $BLG_OUTPUT_DIR/synth or blg-out/synth]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
