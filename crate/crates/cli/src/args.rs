use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "ikod",
    version,
    about = "Image-attention-guided KV merging and collaborative decoding on a toy decoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate tokens and write the generation, attention trace and layout.
    Decode(DecodeArgs),
    /// Degradation, segment and KDE tables from a decode output directory.
    Analyze(AnalyzeArgs),
    /// Run a grid of policies and write one summary row per grid point.
    Sweep(SweepArgs),
    /// Analytic FLOPs of original and merged-cache decoding.
    Flops(FlopsArgs),
    /// CHAIR scores from caption records and binary classification scores.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the decoding policy seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Also write the merge plan of every step.
    #[arg(long)]
    pub emit_merge_plans: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Directory written by `decode`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace the recorded trace by uniform attention rows over the same
    /// layout and add the analytic prediction column.
    #[arg(long)]
    pub synthetic_uniform: bool,
    /// KDE bandwidth used on both axes.
    #[arg(long, default_value_t = ikod_core::attn_analysis::DEFAULT_BANDWIDTH)]
    pub bandwidth: f64,
    /// KDE grid points per axis.
    #[arg(long, default_value_t = 41)]
    pub grid: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub layers: usize,
    /// Sequence length.
    #[arg(long)]
    pub n: usize,
    /// Hidden size.
    #[arg(long)]
    pub d: usize,
    /// Text length subject to merging.
    #[arg(long)]
    pub l: usize,
    #[arg(long)]
    pub lambda: f64,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// JSON lines of `{"mentioned": [...], "ground_truth": [...]}`.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// JSON object `{"tp": .., "fp": .., "fn": .., "tn": ..}`.
    #[arg(long)]
    pub binary: Option<PathBuf>,
}
