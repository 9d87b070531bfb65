use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sweepfuse_core::synthetic::SceneKind;

#[derive(Debug, Parser)]
#[command(
    name = "sweepfuse",
    version,
    about = "Plane-sweep multi-view stereo with pyramid refinement and point-cloud fusion"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Run-configuration overrides shared by every subcommand. Flags win over
/// `--config`; `SWEEPFUSE_SEED` wins over both for the seed.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Worker threads; 1 runs everything on one thread.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Matching strategy: pixelwise, voxelwise or photometric.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Model parameters (SWFT) for the learned strategies.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_name = "MM")]
    pub depth_min: Option<f64>,
    #[arg(long, global = true, value_name = "MM")]
    pub depth_max: Option<f64>,
    /// Number of depth hypotheses.
    #[arg(long, global = true, value_name = "D")]
    pub depth_count: Option<usize>,
    /// Views per estimate at test time, reference included.
    #[arg(long, global = true, value_name = "N")]
    pub views_test: Option<usize>,
    /// Views per training sample, reference included.
    #[arg(long, global = true, value_name = "N")]
    pub views_train: Option<usize>,
    /// Pyramid levels.
    #[arg(long, global = true, value_name = "K")]
    pub levels: Option<usize>,
    #[arg(long, global = true, value_name = "C")]
    pub fusion_confidence: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic scenes with ground truth.
    Synth(SynthArgs),
    /// Depth and confidence maps for one reference view.
    Depth(DepthArgs),
    /// Estimate every view at every level and refine level 0.
    Pyramid(PyramidArgs),
    /// Filter refined depth maps and fuse them into a PLY cloud.
    Fuse(FuseArgs),
    /// Accuracy and completeness of a cloud against ground truth.
    Eval(EvalArgs),
    /// Train the learned strategies on a synthetic dataset.
    Train(TrainArgs),
    /// Finite-difference gradient checks in double precision.
    Gradcheck(GradcheckArgs),
    /// Parameter table of the networks.
    Summary,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Kind {
    PlaneAndBox,
    FrontoPlane,
}

impl From<Kind> for SceneKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::PlaneAndBox => SceneKind::PlaneAndBox,
            Kind::FrontoPlane => SceneKind::FrontoPlane,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub scenes: usize,
    /// Cameras per scene.
    #[arg(long, default_value_t = 5)]
    pub views: usize,
    #[arg(long, default_value_t = 160)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long, value_enum, default_value_t = Kind::PlaneAndBox)]
    pub kind: Kind,
}

#[derive(Debug, Args)]
pub struct DepthArgs {
    #[arg(long, default_value = "data/scene_0000")]
    pub scene: PathBuf,
    /// Reference view index.
    #[arg(long = "ref", default_value_t = 0)]
    pub reference: usize,
    /// Output directory; defaults to `<scene>/depth`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PyramidArgs {
    #[arg(long, default_value = "data/scene_0000")]
    pub scene: PathBuf,
    /// Output directory; defaults to `<scene>/pyramid`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long, default_value = "data/scene_0000")]
    pub scene: PathBuf,
    /// Directory with refined maps; defaults to `<scene>/pyramid`.
    #[arg(long)]
    pub depth: Option<PathBuf>,
    /// Output cloud; defaults to `<scene>/fused.ply`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, default_value = "data/scene_0000")]
    pub scene: PathBuf,
    /// Predicted cloud; defaults to `<scene>/fused.ply`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Ground-truth cloud; defaults to `<scene>/gt_cloud.ply`.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Outlier distance for accuracy, mm.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Report path; defaults to `<scene>/eval.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Continue from `<out>/state.json`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub val_scenes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
