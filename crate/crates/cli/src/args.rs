use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "lsr", version, about = "Self-reinforced cascaded regression for face landmarks")]
pub struct Cli {
    /// Worker threads for the parallel maps; results do not depend on it.
    #[arg(long, global = true, env = "LSR_THREADS")]
    pub threads: Option<usize>,

    /// Suppress the structured log on standard output.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a seeded synthetic face dataset with ground-truth landmarks.
    Synth(SynthArgs),
    /// Train a supervised cascade on the labeled split.
    Train(TrainArgs),
    /// Self-reinforced training from the train and unlabeled splits.
    Reinforce(ReinforceArgs),
    /// Write predicted landmarks as pts files.
    Predict(PredictArgs),
    /// NME, CED and discrepancy-error correlation on a labeled split.
    Eval(EvalArgs),
    /// Structured-text export of a model container.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Train, unlabeled and test parts as ratios summing to 1 or as counts summing to --count.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, default_value_t = 128)]
    pub image_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub deformation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub homography_jitter: f64,
    #[arg(long, default_value_t = 0.04)]
    pub bbox_jitter: f64,
    #[arg(long, default_value_t = 0.5)]
    pub clutter: f64,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 1)]
    pub texture_seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    /// Cascade stages T.
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Comma-separated sampling radii per stage, as fractions of face size.
    #[arg(long)]
    pub radius: Option<String>,
    /// Absolute ridge weight μ.
    #[arg(long, conflicts_with = "mu_per_feature")]
    pub mu: Option<f64>,
    /// Ridge weight per binary feature, μ = value · D.
    #[arg(long)]
    pub mu_per_feature: Option<f64>,
    /// Jittered initial shapes per training face.
    #[arg(long)]
    pub perturbations: Option<usize>,
    /// Random pixel-pair tests evaluated per tree node.
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub pixel_pool: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Split to train on.
    #[arg(long, default_value = "train")]
    pub split: String,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Args)]
pub struct ReinforceFlags {
    /// Geometry weight λ in the combined score.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha0: f64,
    #[arg(long, default_value_t = 0.25)]
    pub alpha_step: f64,
    #[arg(long, default_value_t = 5)]
    pub max_iters: usize,
    /// Convergence bound on the mean change of the appearance and geometry scores.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Floor applied to a and g before the logarithm; 0 rejects zero scores outright.
    #[arg(long, default_value_t = 0.0)]
    pub score_floor: f64,
    /// Perturbation standard deviation as a fraction of the mean inter-pupil distance.
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// Valid/invalid perturbation distance as a fraction of the mean inter-pupil distance.
    #[arg(long, default_value_t = 0.05)]
    pub dt: f64,
    /// Perturbation draws per landmark for the appearance classifiers.
    #[arg(long, default_value_t = 200)]
    pub draws: usize,
    #[arg(long, default_value_t = 8)]
    pub bins: usize,
    #[arg(long, default_value_t = 1.0)]
    pub smoothing: f64,
    /// Comma-separated landmark indices for the geometry invariants; the
    /// 14-point ibug subset is used for 68-point data when omitted.
    #[arg(long)]
    pub stable_subset: Option<String>,
    #[arg(long, default_value_t = 0.05)]
    pub rel_std: f64,
    #[arg(long, default_value_t = 256)]
    pub max_combinations: usize,
    /// Also re-predict the manual seed each iteration (labels stay fixed).
    #[arg(long)]
    pub refit_manual: bool,
}

#[derive(Debug, Args)]
pub struct ReinforceArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub reinforce: ReinforceFlags,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// λ for the discrepancy score written to correlation.csv.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    pub score_floor: f64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}
