use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use stablegrasp::contact::{DEFAULT_CONTACT_DELTA, DEFAULT_TAU};
use stablegrasp::metrics::DEFAULT_IOU_THRESHOLDS;

#[derive(Debug, Parser)]
#[command(name = "stablegrasp", version, about = "Hand-object grasp segmentation, axis fitting and pose reconstruction")]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Find the longest stable-grasp interval from known object poses.
    Segment(SegmentArgs),
    /// Fit static and 1-DoF models to known object poses.
    FitAxis(FitAxisArgs),
    /// Recover the object trajectory from masks and hand meshes.
    Reconstruct(ReconstructArgs),
    /// Score reconstruction results against ground truth.
    Metrics(MetricsArgs),
    /// Generate a synthetic bundle from a scene spec.
    Synth(SynthArgs),
    /// Contact-IOU and rotation-error curves over normalized grasp time.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ContactArgs {
    /// Minimum pairwise contact IOU inside a stable grasp.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Contact distance in meters.
    #[arg(long, default_value_t = DEFAULT_CONTACT_DELTA)]
    pub contact_delta: f64,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(required = true)]
    pub bundles: Vec<PathBuf>,
    /// Pose file (gt.json layout or a reconstruct result); defaults to the bundle ground truth.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    #[command(flatten)]
    pub contact: ContactArgs,
    /// Output JSON file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitAxisArgs {
    pub bundle: PathBuf,
    #[arg(long)]
    pub poses: Option<PathBuf>,
    /// Inclusive frame range START:END; segmented from contacts when omitted.
    #[arg(long)]
    pub interval: Option<String>,
    #[command(flatten)]
    pub contact: ContactArgs,
    /// Curve extent beyond the interval, as a fraction of its length.
    #[arg(long, default_value_t = 0.5)]
    pub margin: f64,
    /// Directory for fit.json and curves.csv; fit JSON goes to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(required = true)]
    pub bundles: Vec<PathBuf>,
    #[arg(long, value_parser = ["one_dof", "static", "dynamic", "single_frame"])]
    pub variant: Option<String>,
    /// Optimizer settings as TOML or JSON; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Frames sampled from each sequence.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Initializations when the bundle has no priors.
    #[arg(long)]
    pub inits: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub render_size: Option<u32>,
    #[arg(long)]
    pub lambda_mask: Option<f64>,
    #[arg(long)]
    pub lambda_push: Option<f64>,
    #[arg(long)]
    pub lambda_pull: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ignore the bundle's initialization priors.
    #[arg(long)]
    pub no_priors: bool,
    /// Write per-frame silhouette overlays.
    #[arg(long)]
    pub overlays: bool,
    /// Output directory, one subdirectory per bundle; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Reconstruct results (result.json or its directory).
    #[arg(required = true)]
    pub results: Vec<PathBuf>,
    /// Ground-truth file; only with a single result.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Bundle to score against; only with a single result.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Mask IOU thresholds as fractions.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_IOU_THRESHOLDS)]
    pub thresholds: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_CONTACT_DELTA)]
    pub contact_delta: f64,
    /// Directory for metrics.csv and metrics.json; CSV to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene spec, TOML or JSON.
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(required = true)]
    pub bundles: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub margin: f64,
    #[command(flatten)]
    pub contact: ContactArgs,
    /// Bins for the aggregated curves.
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
}
