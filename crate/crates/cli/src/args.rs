use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "densecyst",
    version,
    about = "Dense CNN classification of labeled 3-D volumes from 2-D slices"
)]
pub struct Cli {
    /// key=value file supplying flag values; explicit flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom cohort (RVOL files plus manifest).
    Synth(SynthArgs),
    /// Train one network on every patient of a manifest.
    Train(TrainCmd),
    /// Stratified k-fold cross-validation.
    Cv(CvCmd),
    /// Patient-level class probabilities from a checkpoint.
    Predict(PredictCmd),
    /// Write guided-backpropagation saliency maps as PGM images.
    Saliency(SaliencyCmd),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long, default_value = "synth")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 24)]
    pub depth: usize,
    #[arg(long, default_value_t = 160)]
    pub height: usize,
    #[arg(long, default_value_t = 160)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 12.0)]
    pub noise_std: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Network family: densenet or cnn-baseline.
    #[arg(long, default_value = "densenet")]
    pub model: String,
    #[arg(long, default_value_t = 3)]
    pub num_blocks: usize,
    /// Dense layers per block (L).
    #[arg(long, default_value_t = 10)]
    pub layers_per_block: usize,
    /// Growth rate (k).
    #[arg(long, default_value_t = 9)]
    pub growth_rate: usize,
    /// Stem width k0 [default: 2 × growth rate = 18].
    #[arg(long)]
    pub initial_channels: Option<usize>,
    /// Bottleneck width as a multiple of the growth rate.
    #[arg(long, default_value_t = 4)]
    pub bottleneck_factor: usize,
    /// Side of the square slice window and network input.
    #[arg(long, default_value_t = 144)]
    pub input_size: usize,
    /// Transition compression in (0,1].
    #[arg(long, default_value_t = 1.0)]
    pub compression: f64,
    /// Transition pooling: avg or max.
    #[arg(long, default_value = "avg")]
    pub transition_pool: String,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 40)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.0005)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Root seed for initialization, shuffling, augmentation and folds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// "auto" (inverse class frequency) or four comma-separated weights.
    #[arg(long, default_value = "auto")]
    pub class_weights: String,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    /// Minimum overlap ratio for a slice to be used.
    #[arg(long, default_value_t = 0.10)]
    pub threshold: f64,
    /// Rotation range lower bound, degrees.
    #[arg(long, default_value_t = -25.0, allow_negative_numbers = true)]
    pub rotation_min: f64,
    /// Rotation range upper bound, degrees.
    #[arg(long, default_value_t = 25.0, allow_negative_numbers = true)]
    pub rotation_max: f64,
    #[arg(long, default_value_t = 0.9)]
    pub zoom_min: f64,
    #[arg(long, default_value_t = 1.2)]
    pub zoom_max: f64,
    /// Probability of a vertical flip.
    #[arg(long, default_value_t = 0.5)]
    pub flip_prob: f64,
    /// Disable augmentation entirely.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    /// Dataset manifest (patient_id,label,path).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint written after training.
    #[arg(long, default_value = "model.dcys")]
    pub out: PathBuf,
    /// Per-epoch loss and accuracy records.
    #[arg(long, default_value = "loss.csv")]
    pub loss_csv: PathBuf,
    /// Also checkpoint every N epochs (0 disables).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct CvCmd {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of folds.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Directory for cv_report.csv and cv_table.txt.
    #[arg(long, default_value = "cv")]
    pub out: PathBuf,
    /// Aggregate by pooling counts instead of averaging normalized rows.
    #[arg(long)]
    pub pooled: bool,
    /// Run folds concurrently.
    #[arg(long)]
    pub parallel: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest of volumes to process.
    #[arg(long, conflicts_with = "volume", required_unless_present = "volume")]
    pub manifest: Option<PathBuf>,
    /// A single RVOL file.
    #[arg(long)]
    pub volume: Option<PathBuf>,
    /// Patient id for --volume [default: file stem].
    #[arg(long, requires = "volume")]
    pub patient_id: Option<String>,
    #[arg(long, default_value_t = 0.10)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct PredictCmd {
    #[command(flatten)]
    pub input: InputArgs,
}

#[derive(Debug, Args)]
pub struct SaliencyCmd {
    #[command(flatten)]
    pub input: InputArgs,
    /// Output directory for PGM maps.
    #[arg(long, default_value = "saliency")]
    pub out: PathBuf,
    /// Class to explain [default: predicted class of each slice].
    #[arg(long)]
    pub target: Option<usize>,
    /// Axial slice indices to emit [default: every surviving slice].
    #[arg(long, value_delimiter = ',')]
    pub slices: Vec<usize>,
    /// Plain gradient instead of guided backpropagation.
    #[arg(long)]
    pub vanilla: bool,
}
