mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::ConfigError;

/// Plane-orientation classification toolkit: phantom generation, slice
/// cleaning, training, uncertainty-gated fusion, export and Grad-CAM.
#[derive(Debug, Parser)]
#[command(name = "planemeta", version, propagate_version = true)]
pub struct Cli {
    /// TOML run configuration; command-line flags override its keys.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the effective configuration and exit without running.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic head volumes or a lesion slice dataset.
    Phantom(PhantomArgs),
    /// Clean volumes and images into a slice dataset.
    Preprocess(PreprocessArgs),
    /// Split a slice manifest into parts by volume.
    Split(SplitArgs),
    /// Train a plane or tumor classifier and save it as a bundle.
    Train(TrainArgs),
    /// Score a bundle on a labeled slice manifest.
    Evaluate(EvaluateArgs),
    /// Dump image-only and metadata-enhanced tumor predictions.
    Pairs(PairsArgs),
    /// Sweep the gate threshold over dumped prediction pairs.
    Sweep(SweepArgs),
    /// Evaluate the gate at one threshold over dumped prediction pairs.
    GateEval(GateEvalArgs),
    /// Write a portable bundle with parity fixtures.
    Export(ExportArgs),
    /// Grad-CAM heatmaps and a gallery of confident misclassifications.
    Explain(ExplainArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CleaningFlags {
    /// Keep every n-th slice along each axis.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Mean intensity a slice must exceed.
    #[arg(long)]
    pub mean_min: Option<f32>,
    /// Foreground coverage a slice must exceed.
    #[arg(long)]
    pub coverage_min: Option<f32>,
    /// Side length of the square output slices.
    #[arg(long)]
    pub size: Option<usize>,
    /// Radius of the cubic opening element.
    #[arg(long)]
    pub opening_radius: Option<usize>,
    /// Intensity above which a voxel counts as foreground.
    #[arg(long)]
    pub foreground_threshold: Option<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhantomKind {
    /// Plain head volumes written as .nii.gz.
    Head,
    /// Lesion phantoms cut into a labeled slice dataset.
    Lesion,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "head")]
    pub kind: PhantomKind,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Volume shape as X,Y,Z.
    #[arg(long, value_delimiter = ',', default_values_t = [48, 52, 46])]
    pub shape: Vec<usize>,
    /// Lesion slices are cut at the lesion centre and at this offset either side.
    #[arg(long, default_value_t = 2)]
    pub spread: usize,
    #[command(flatten)]
    pub cleaning: CleaningFlags,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Directory searched recursively for NIfTI volumes and raster images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Orientation code such as RAS or LPI to use instead of header affines.
    #[arg(long)]
    pub assume_orientation: Option<String>,
    #[command(flatten)]
    pub cleaning: CleaningFlags,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Slice manifest to split.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; defaults to the manifest's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.6, 0.2, 0.2])]
    pub fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = ["train".to_string(), "val".to_string(), "test".to_string()])]
    pub names: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training slice manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation manifest; without it a share of training volumes is held out.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// plane or tumor.
    #[arg(long, default_value = "plane")]
    pub task: String,
    /// 2d, seq, random or random2.
    #[arg(long)]
    pub context: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// tiny, alexnet or resnet18.
    #[arg(long)]
    pub backbone: Option<String>,
    /// min_max01 or pretrain_stats.
    #[arg(long)]
    pub norm: Option<String>,
    /// Start from cached pretrained weights.
    #[arg(long)]
    pub pretrained: bool,
    #[arg(long)]
    pub val_frac: Option<f64>,
    /// Plane bundle whose predictions feed a metadata-enhanced tumor model.
    #[arg(long)]
    pub plane_model: Option<PathBuf>,
    #[arg(long)]
    pub no_augment: bool,
    /// Draw batches uniformly instead of class-balanced.
    #[arg(long)]
    pub unbalanced: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Plane bundle, required by metadata-enhanced models.
    #[arg(long)]
    pub plane_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    #[arg(long)]
    pub image_model: PathBuf,
    #[arg(long)]
    pub meta_model: PathBuf,
    #[arg(long)]
    pub plane_model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Prediction-pair CSV.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of evenly spaced thresholds in [0, 1].
    #[arg(long)]
    pub grid: Option<usize>,
    /// normalized or raw_nats.
    #[arg(long)]
    pub entropy: Option<String>,
}

#[derive(Debug, Args)]
pub struct GateEvalArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "sweep")]
    pub tau: Option<f64>,
    /// Take the threshold and entropy mode from a sweep result.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    #[arg(long)]
    pub entropy: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Slice manifest the fixtures are drawn from.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub fixtures: usize,
    /// Plane bundle supplying fixture planes for metadata-enhanced models.
    #[arg(long)]
    pub plane_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// One or more bundles; the gallery has one row per bundle.
    #[arg(long, required = true, num_args = 1..)]
    pub model: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Confident errors rendered per model.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Layer to explain; defaults to the backbone's last convolutional block.
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long)]
    pub plane_model: Option<PathBuf>,
}

/// Exit code and label for a failure.
fn categorize(err: &anyhow::Error) -> (u8, &'static str) {
    use planemeta::Error as E;
    if err.downcast_ref::<ConfigError>().is_some() {
        return (3, "config");
    }
    if let Some(e) = err.downcast_ref::<E>() {
        return match e {
            E::Config(_) => (3, "config"),
            E::Io { .. }
            | E::MalformedHeader(_)
            | E::UnsupportedDatatype(_)
            | E::CorruptAffine(_)
            | E::UnreadableImage { .. }
            | E::MissingLabel(_)
            | E::ShapeTooSmall(_)
            | E::Manifest(_) => (4, "input"),
            E::EmptySiblingSet(_)
            | E::MissingClass(_)
            | E::EmptyTestSet
            | E::EmptyValidation
            | E::InvalidDistribution(_)
            | E::DimensionMismatch { .. }
            | E::ClassMismatch(..) => (5, "data"),
            E::WeightsUnavailable(_)
            | E::DivergedLoss { .. }
            | E::UnsupportedLayer(_)
            | E::Bundle(_)
            | E::NormalizationMismatch { .. }
            | E::Shape(_)
            | E::LayerNotFound(_)
            | E::NonConvolutionalLayer(_) => (6, "model"),
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return (4, "input");
    }
    (1, "internal")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, label) = categorize(&e);
            eprintln!("error[{label}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
