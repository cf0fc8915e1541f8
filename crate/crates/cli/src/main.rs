use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

/// Train, attack, explain and evaluate compact CNN image classifiers.
#[derive(Parser)]
#[command(name = "shrimpnet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled image tree (`<out>/<class>/<file>.png`).
    Synth(SynthArgs),
    /// Load an image tree, mask backgrounds, resize and split 70/15/15.
    Prepare(PrepareArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Train one model per grid cell and rank the cells.
    Gridsearch(GridArgs),
    /// Write the evaluation report for a checkpoint.
    Evaluate(EvalArgs),
    /// Sweep FGSM epsilons and tabulate accuracy and loss.
    Attack(AttackArgs),
    /// Render class activation map overlays.
    Explain(ExplainArgs),
    /// Evaluate, attack and explain into one directory.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Images per class
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    /// Number of classes (2 to 8)
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Image side length in pixels
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct PrepareArgs {
    /// Dataset root with one folder per class
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Target height and width
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
    pub size: Vec<usize>,
    /// Background handling: alpha, threshold or none
    #[arg(long, default_value = "threshold")]
    pub bg: String,
    /// Luminance cutoff for the threshold background mode
    #[arg(long, default_value_t = 0.92)]
    pub bg_cutoff: f32,
    /// Split seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Training options. Flags override the config file, which overrides the
/// built-in defaults.
#[derive(Args, Clone)]
pub struct TrainOptions {
    /// Prepared dataset directory (output of `prepare`)
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` config file [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Maximum epochs [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 128]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs between learning-rate decays [default: 3]
    #[arg(long)]
    pub step_size: Option<usize>,
    /// Learning-rate decay factor [default: 0.5]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Early-stopping patience in epochs [default: 5]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Number of leading conv blocks kept frozen [default: 0]
    #[arg(long)]
    pub freeze: Option<usize>,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// MixUp Beta alpha, 0 disables [default: 0]
    #[arg(long)]
    pub mixup_alpha: Option<f64>,
    /// CutMix Beta alpha, 0 disables [default: 0]
    #[arg(long)]
    pub cutmix_alpha: Option<f64>,
    /// Probability of augmenting a batch [default: 1]
    #[arg(long)]
    pub augment_prob: Option<f64>,
    /// FGSM epsilon for adversarial training, 0 disables [default: 0]
    #[arg(long)]
    pub fgsm_eps: Option<f64>,
    /// Share of each batch replaced by FGSM examples [default: 0.5]
    #[arg(long)]
    pub adv_fraction: Option<f64>,
    /// Conv filters per block, comma separated [default: 16,32,64,128]
    #[arg(long)]
    pub filters: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub options: TrainOptions,
    /// Resume from a `last.ckpt` written by an earlier run [default: none]
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
    /// Start from the weights of this checkpoint [default: random init]
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub options: TrainOptions,
    /// Grid file with `key = v1, v2, ...` lines [default: none]
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Extra axis `key=v1,v2,...`; repeatable [default: none]
    #[arg(long = "axis")]
    pub axes: Vec<String>,
}

#[derive(Args)]
pub struct CheckpointArgs {
    /// Model checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Prepared dataset directory (output of `prepare`)
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Inference batch size
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CheckpointArgs,
    /// Split to evaluate: train, validation or test
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Bootstrap resamples
    #[arg(long, default_value_t = 1000)]
    pub bootstrap_iterations: usize,
    /// Normal quantile for the bootstrap interval
    #[arg(long, default_value_t = 2.576)]
    pub z: f64,
    /// Bootstrap seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub common: CheckpointArgs,
    /// Comma-separated epsilon ladder starting at 0 [default: 0,0.1,0.12,0.14,0.16,0.18,0.2]
    #[arg(long, value_delimiter = ',')]
    pub eps_list: Option<Vec<f64>>,
    /// Do not clip adversarial pixels to [0, 1] [default: clip]
    #[arg(long)]
    pub no_clip: bool,
}

#[derive(Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: CheckpointArgs,
    /// gradcam, gradcampp, xgradcam or all
    #[arg(long, default_value = "all")]
    pub method: String,
    /// Source id of an image to explain; repeatable [default: first --limit test images]
    #[arg(long = "image")]
    pub images: Vec<String>,
    /// Target class name [default: the predicted class]
    #[arg(long = "class")]
    pub class: Option<String>,
    /// Number of test images explained when no --image is given
    #[arg(long, default_value_t = 4)]
    pub limit: usize,
    /// Also write each raw heatmap as a text matrix [default: off]
    #[arg(long)]
    pub dump_text: bool,
}

#[derive(Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: CheckpointArgs,
    /// Comma-separated epsilon ladder starting at 0 [default: 0,0.1,0.12,0.14,0.16,0.18,0.2]
    #[arg(long, value_delimiter = ',')]
    pub eps_list: Option<Vec<f64>>,
    /// Bootstrap resamples
    #[arg(long, default_value_t = 1000)]
    pub bootstrap_iterations: usize,
    /// Bootstrap seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of test images explained
    #[arg(long, default_value_t = 4)]
    pub limit: usize,
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("SHRIMPXNET_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("SHRIMPXNET_THREADS must be a non-negative integer, got `{v}`"))?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|c| c.downcast_ref::<shrimpnet::Error>())
        .map_or(2, |e| if e.is_numeric() { 3 } else { 2 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Gridsearch(a) => commands::gridsearch(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Attack(a) => commands::attack(a),
        Command::Explain(a) => commands::explain(a),
        Command::Report(a) => commands::report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
