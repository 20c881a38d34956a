//! `msnerf`: train, render and evaluate multispectral radiance fields.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.

mod commands;
mod preview;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msnerf::training::memory::{DEFAULT_SAMPLES_PER_RAY, HOST_REFERENCES};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Divergence(m) => write!(f, "training diverged: {m}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "msnerf", version, about = "Multispectral neural radiance fields")]
pub struct Cli {
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a field on a posed multispectral dataset.
    Train(TrainArgs),
    /// Render views of a checkpoint to MSR images.
    Render(RenderArgs),
    /// Estimate host and device memory for a training run.
    Budget(BudgetArgs),
    /// Back-project rendered depth into a spectral PLY point cloud.
    ExportPointcloud(ExportArgs),
    /// Compare two MSR images: MSE, PSNR and SSIM per band and pooled.
    EvalMetrics(EvalMetricsArgs),
    /// Geometric accuracy of a point cloud against a reference cloud.
    EvalGeo(EvalGeoArgs),
    /// Render an analytic scene from an orbit into a dataset.
    GenSynthetic(GenSyntheticArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Training manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints, logs and the metric report.
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out manifest evaluated after training.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    /// Expected band count; the run stops if the data disagrees.
    #[arg(long)]
    pub bands: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// No sample jitter and a fixed gradient reduction order.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value_t = 30_000)]
    pub max_steps: u64,
    /// Training rays per batch, a multiple of 128.
    #[arg(long, default_value_t = 32_768)]
    pub train_rays: usize,
    /// Evaluation rays per batch, a multiple of 128.
    #[arg(long, default_value_t = 16_384)]
    pub eval_rays: usize,
    /// Images whose rays form the sampling pool (N); all images when omitted.
    #[arg(long)]
    pub images_per_pool: Option<usize>,
    /// Batches between pool rebuilds (M); never when omitted.
    #[arg(long)]
    pub pool_refresh: Option<usize>,
    /// Adam rate for hash tables.
    #[arg(long, default_value_t = 1e-2)]
    pub grid_lr: f64,
    /// Adam rate for MLP weights.
    #[arg(long, default_value_t = 1e-3)]
    pub mlp_lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub interlevel_weight: f64,
    /// log2 of the hash table rows per level.
    #[arg(long, default_value_t = 21)]
    pub hash_log2_size: u32,
    #[arg(long, default_value_t = 16)]
    pub hash_levels: usize,
    #[arg(long, default_value_t = 4096)]
    pub hash_max_resolution: u32,
    /// Hidden width of the density and color MLPs.
    #[arg(long, default_value_t = 128)]
    pub hidden_dim: usize,
    /// Samples per proposal round.
    #[arg(long, value_delimiter = ',', default_values_t = [512, 256])]
    pub proposal_samples: Vec<usize>,
    /// Samples evaluated by the radiance field.
    #[arg(long, default_value_t = 48)]
    pub final_samples: usize,
    /// Gradient partitions in deterministic mode.
    #[arg(long, default_value_t = 8)]
    pub gradient_shards: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    #[arg(long, default_value_t = 2000)]
    pub checkpoint_every: u64,
    /// Steps between log lines.
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest supplying cameras and poses.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Render only this frame index.
    #[arg(long)]
    pub frame: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write lossy 8-bit PNG previews per band.
    #[arg(long)]
    pub preview: bool,
}

#[derive(Args, Debug, Clone)]
pub struct BudgetArgs {
    #[arg(long, default_value_t = 4000)]
    pub images: u64,
    #[arg(long, default_value_t = 1280)]
    pub width: u64,
    #[arg(long, default_value_t = 960)]
    pub height: u64,
    #[arg(long, default_value_t = 6)]
    pub bands: u64,
    /// Images in the ray pool (N).
    #[arg(long, default_value_t = HOST_REFERENCES[0].pool_images)]
    pub images_per_pool: u64,
    #[arg(long, default_value_t = 32_768)]
    pub train_rays: u64,
    #[arg(long, default_value_t = 16_384)]
    pub eval_rays: u64,
    /// Samples per ray across proposal rounds and the final set.
    #[arg(long, default_value_t = DEFAULT_SAMPLES_PER_RAY)]
    pub samples_per_ray: u64,
    /// Also print JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use every n-th pixel in each direction.
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
    /// Minimum rendered accumulation for a point to be kept.
    #[arg(long, default_value_t = 0.5)]
    pub min_accumulation: f64,
}

#[derive(Args, Debug, Clone)]
pub struct EvalMetricsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub max_value: f64,
    /// Write the JSON report here as well as to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalGeoArgs {
    #[arg(long = "test")]
    pub test_cloud: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Points correspond by index.
    #[arg(long, conflicts_with = "auto_match")]
    pub matched: bool,
    /// Match each test point to its nearest reference point within this many meters.
    #[arg(long, value_name = "CUTOFF_M")]
    pub auto_match: Option<f64>,
    #[arg(long, default_value = "Test point cloud")]
    pub label: String,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Scene description (JSON); the built-in three-sphere scene when omitted.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub views: usize,
    #[arg(long, default_value_t = 4)]
    pub holdout_views: usize,
    /// Horizontal orbit radius.
    #[arg(long, default_value_t = 2.0)]
    pub radius: f64,
    /// Gimbal tilt in degrees, negative looks down.
    #[arg(long, default_value_t = msnerf::synthetic::DEFAULT_TILT_DEG, allow_negative_numbers = true)]
    pub tilt: f64,
    #[arg(long, default_value_t = 64)]
    pub width: u32,
    #[arg(long, default_value_t = 64)]
    pub height: u32,
    #[arg(long, default_value_t = 36.0)]
    pub fov: f64,
    #[arg(long, default_value_t = 1.5)]
    pub scene_scale: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("configuration error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Render(a) => commands::render(&a),
        Command::Budget(a) => commands::budget(&a),
        Command::ExportPointcloud(a) => commands::export_pointcloud(&a),
        Command::EvalMetrics(a) => commands::eval_metrics(&a),
        Command::EvalGeo(a) => commands::eval_geo(&a),
        Command::GenSynthetic(a) => commands::gen_synthetic(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
