use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rhvae::evalaug::Composition;
use rhvae::generate::Scheme;
use rhvae::geometry::PathMode;
use rhvae::model::Mode;

#[derive(Parser, Debug)]
#[command(name = "rhvae", version, about = "Geometry-aware VAE training, generation and augmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Output directory; built under a temporary name and renamed when done.
    #[arg(long, short, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Replace the output directory if it already exists.
    #[arg(long, global = true)]
    pub force: bool,

    /// Root seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// TOML file with the command's settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// -v for info, -vv for debug.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write a checkpoint and the ELBO trace.
    Train(TrainArgs),
    /// Sample images from a trained model.
    Generate(GenerateArgs),
    /// Decode a latent path between two points.
    Interpolate(InterpolateArgs),
    /// Render the log metric volume element over the latent plane.
    Map(MapArgs),
    /// Run an augmentation plan.
    Augment(PlanArgs),
    /// GAN-train / GAN-test scores for a plan's generator.
    Evaluate(PlanArgs),
}

/// IDX inputs; without them the built-in shapes corpus is used.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long, requires = "labels")]
    pub images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    pub labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(short, long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value = "metric-volume")]
    pub scheme: Scheme,
    /// Label written for every generated image.
    #[arg(long, default_value_t = 0)]
    pub label: usize,
    /// Image side length; the input dimension must be its square.
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thinning: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Dataset indices of the two end points (encoder means).
    #[arg(long, num_args = 2, value_names = ["FROM", "TO"], conflicts_with = "latents")]
    pub between: Option<Vec<usize>>,
    /// End points given directly: `x0,y0,x1,y1` for a 2-D latent space.
    #[arg(long, value_delimiter = ',')]
    pub latents: Option<Vec<f64>>,
    #[arg(long, default_value = "geodesic")]
    pub mode: PathMode,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long)]
    pub side: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub res: usize,
    /// Padding around the centroids, in latent units.
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    /// Plan file (TOML).
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, requires = "test_labels")]
    pub test_images: Option<PathBuf>,
    #[arg(long, requires = "test_images")]
    pub test_labels: Option<PathBuf>,
    #[arg(long)]
    pub composition: Option<Composition>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
}
