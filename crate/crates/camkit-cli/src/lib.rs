//! Command-line front end: train, classify, saliency, feature-cam, explain,
//! evaluate.
//!
//! Exit codes: 0 success, 1 flag/validation error, 2 runtime error.

mod commands;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use camkit::Error;

#[derive(Debug, Parser)]
#[command(
    name = "camkit",
    version,
    about = "Saliency-map interpretability toolkit for small CNN classifiers"
)]
pub struct Cli {
    /// Seed for every stochastic step (training shuffles, noise, baselines).
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,

    /// Worker threads for per-image parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// Print per-step progress.
    #[arg(long, global = true, default_value_t = false)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the bundled CNN on an IDX or directory dataset.
    Train(TrainArgs),
    /// Classify one image and print the top predictions.
    Classify(ClassifyArgs),
    /// Compute a saliency map for one image.
    Saliency(SaliencyArgs),
    /// Combine perturbed inputs with a saliency map.
    FeatureCam(FeatureCamArgs),
    /// Build an explanation map (threshold, mask, pixel copy).
    Explain(ExplainArgs),
    /// Evaluate explanation maps over a dataset, with optional random-mask
    /// baseline.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset: a directory of class subdirectories of PNGs, a directory
    /// containing IDX files, or an images-idx3 file path.
    #[arg(long)]
    pub dataset: String,
    /// Where to write the CNN1 checkpoint.
    #[arg(long)]
    pub out: String,
    #[arg(long, default_value_t = 6)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Momentum coefficient; 0 disables momentum.
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Use only the first N images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Evaluate accuracy on this dataset after training.
    #[arg(long)]
    pub test_dataset: Option<String>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub image: String,
    #[arg(long, default_value_t = 3)]
    pub topk: usize,
    /// Bilinearly resize the image to the model's input extents.
    #[arg(long, default_value_t = false)]
    pub resize: bool,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub image: String,
    /// cam | gradcam | gradcampp | smoothgradcampp
    #[arg(long, default_value = "gradcam")]
    pub method: String,
    /// Convolutional layer to explain; defaults to the last conv layer.
    #[arg(long)]
    pub layer: Option<String>,
    /// Class index or "auto" for the argmax prediction.
    #[arg(long, default_value = "auto")]
    pub class: String,
    #[arg(long, default_value = ".")]
    pub out_dir: String,
    #[arg(long, default_value_t = 8)]
    pub smooth_n: usize,
    #[arg(long, default_value_t = 0.1)]
    pub smooth_sigma: f64,
    #[arg(long, default_value_t = false)]
    pub resize: bool,
}

#[derive(Debug, Args)]
pub struct FeatureCamArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub image: String,
    /// gradcam | gradcampp | smoothgradcampp
    #[arg(long, default_value = "gradcam")]
    pub base: String,
    /// Combination experiment 1..3 (ignored with --top5).
    #[arg(long)]
    pub experiment: Option<u8>,
    /// Perturbed input version 1..3 (ignored with --top5).
    #[arg(long)]
    pub input_variant: Option<u8>,
    #[arg(long, default_value_t = 0.25)]
    pub k: f64,
    /// sobel | canny
    #[arg(long, default_value = "sobel")]
    pub edge_method: String,
    /// Externally computed descriptor (FMAP or grayscale PNG); overrides
    /// --edge-method.
    #[arg(long)]
    pub descriptor_file: Option<String>,
    /// Read the 2:1 blend as descriptor-heavy instead of image-heavy.
    #[arg(long, default_value_t = false)]
    pub invert_blend: bool,
    /// Emit all five retained combinations.
    #[arg(long, default_value_t = false)]
    pub top5: bool,
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, default_value = "auto")]
    pub class: String,
    #[arg(long, default_value = ".")]
    pub out_dir: String,
    #[arg(long, default_value_t = 8)]
    pub smooth_n: usize,
    #[arg(long, default_value_t = 0.1)]
    pub smooth_sigma: f64,
    #[arg(long, default_value_t = false)]
    pub resize: bool,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub image: String,
    /// Saliency method, or the base method when --experiment is given.
    #[arg(long, default_value = "gradcam")]
    pub method: String,
    #[arg(long)]
    pub experiment: Option<u8>,
    #[arg(long)]
    pub input_variant: Option<u8>,
    #[arg(long, default_value_t = 0.25)]
    pub k: f64,
    #[arg(long, default_value = "sobel")]
    pub edge_method: String,
    #[arg(long)]
    pub descriptor_file: Option<String>,
    #[arg(long, default_value_t = 80.0)]
    pub percentile: f64,
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, default_value = "auto")]
    pub class: String,
    #[arg(long, default_value = ".")]
    pub out_dir: String,
    #[arg(long, default_value_t = 8)]
    pub smooth_n: usize,
    #[arg(long, default_value_t = 0.1)]
    pub smooth_sigma: f64,
    #[arg(long, default_value_t = false)]
    pub resize: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub dataset: String,
    /// top5 | all | base | comma-separated variant ids like E1-I2,E3-I1
    #[arg(long, default_value = "top5")]
    pub variants: String,
    #[arg(long, default_value_t = 80.0)]
    pub percentile: f64,
    /// gradcam | gradcampp | smoothgradcampp
    #[arg(long, default_value = "gradcam")]
    pub base: String,
    #[arg(long, default_value_t = 0.25)]
    pub k: f64,
    #[arg(long, default_value = "sobel")]
    pub edge_method: String,
    /// Compare against ground-truth labels instead of the model's own
    /// predictions.
    #[arg(long, default_value_t = false)]
    pub ground_truth: bool,
    /// Random-mask baseline repetitions (0 disables the baseline).
    #[arg(long, default_value_t = 0)]
    pub baseline_trials: usize,
    #[arg(long)]
    pub limit: Option<usize>,
    /// CSV report path.
    #[arg(long)]
    pub report: Option<String>,
    /// JSON report path.
    #[arg(long)]
    pub json: Option<String>,
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub smooth_n: usize,
    #[arg(long, default_value_t = 0.1)]
    pub smooth_sigma: f64,
}

/// Parse and dispatch. Returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // Help and version go to stdout, errors to stderr.
            let _ = e.print();
            return code;
        }
    };

    if cli.jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return 1;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot build worker pool: {e}");
            return 2;
        }
    };

    let result = pool.install(|| match &cli.command {
        Command::Train(args) => commands::train(&cli, args),
        Command::Classify(args) => commands::classify(&cli, args),
        Command::Saliency(args) => commands::saliency(&cli, args),
        Command::FeatureCam(args) => commands::feature_cam(&cli, args),
        Command::Explain(args) => commands::explain(&cli, args),
        Command::Evaluate(args) => commands::evaluate(&cli, args),
    });

    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}
