mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "fakemap", version, about = "Gray-scale fakeness maps: data, training, evaluation, clustering, robustness")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream (overrides FAKEMAP_SEED and the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts of this run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    Dataset(DatasetArgs),
    /// Train a locator on a dataset's train split.
    Train(TrainArgs),
    /// Score a checkpoint and write reports, maps and overlays.
    Eval(EvalArgs),
    /// Single-sample clustering of classifier features.
    Cluster(ClusterArgs),
    /// Degradation sweeps and the disorganization test.
    Robust(RobustArgs),
}

#[derive(Args, Debug)]
pub(crate) struct DatasetArgs {
    #[arg(long)]
    pub(crate) count_real: Option<usize>,
    #[arg(long)]
    pub(crate) count_fake: Option<usize>,
    #[arg(long)]
    pub(crate) size: Option<usize>,
    /// Comma-separated families: transposed_conv, interpolation, unpooling.
    #[arg(long, value_delimiter = ',')]
    pub(crate) families: Option<Vec<String>>,
    /// Also emit the base image of every fake as a real sample.
    #[arg(long)]
    pub(crate) paired_reals: bool,
    #[arg(long)]
    pub(crate) entire_fraction: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub(crate) struct DataArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub(crate) data: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub(crate) enum BackboneArg {
    Compact,
    Standard,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub(crate) enum LossArg {
    L1,
    L2,
    Focal,
    Dice,
}

#[derive(Args, Debug)]
pub(crate) struct TrainArgs {
    #[command(flatten)]
    pub(crate) data: DataArgs,
    #[arg(long)]
    pub(crate) epochs: Option<usize>,
    #[arg(long)]
    pub(crate) batch_size: Option<usize>,
    #[arg(long)]
    pub(crate) lr: Option<f64>,
    #[arg(long)]
    pub(crate) input_size: Option<usize>,
    #[arg(long, value_enum)]
    pub(crate) backbone: Option<BackboneArg>,
    #[arg(long, value_enum)]
    pub(crate) loss: Option<LossArg>,
    /// Train without the attention multiply.
    #[arg(long)]
    pub(crate) no_attention: bool,
    /// `partial`, `none`, `both`, or `P_REAL:P_FAKE`.
    #[arg(long)]
    pub(crate) augment: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub(crate) enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug, Clone)]
pub(crate) struct ModelArgs {
    #[command(flatten)]
    pub(crate) data: DataArgs,
    /// Checkpoint directory (weights.bin + checkpoint.json).
    #[arg(long)]
    pub(crate) checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub(crate) split: SplitArg,
}

#[derive(Args, Debug)]
pub(crate) struct EvalArgs {
    #[command(flatten)]
    pub(crate) model: ModelArgs,
    /// Binarization threshold for IoU/Dice/PBCA/IINC.
    #[arg(long)]
    pub(crate) threshold: Option<f32>,
    /// Score cutoff for the fake decision.
    #[arg(long)]
    pub(crate) cutoff: Option<f64>,
    /// Maps and overlays are written for at most this many samples.
    #[arg(long, default_value_t = 32)]
    pub(crate) max_images: usize,
}

#[derive(Args, Debug)]
pub(crate) struct ClusterArgs {
    #[command(flatten)]
    pub(crate) model: ModelArgs,
    #[arg(long)]
    pub(crate) runs: Option<usize>,
}

#[derive(Args, Debug)]
pub(crate) struct RobustArgs {
    #[command(flatten)]
    pub(crate) model: ModelArgs,
    /// jpeg, blur, noise or lowres.
    #[arg(long)]
    pub(crate) kind: Option<String>,
    /// Comma-separated parameter grid.
    #[arg(long, value_delimiter = ',')]
    pub(crate) grid: Option<Vec<f64>>,
    /// Also write the quadrant-shuffle prediction grid.
    #[arg(long)]
    pub(crate) disorganize: bool,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Dataset(_) => "dataset",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Cluster(_) => "cluster",
            Command::Robust(_) => "robust",
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(out) = cli.out {
        cfg.output = Some(out);
    }
    cfg.resolve_seed(cli.seed)?;
    match cli.command {
        Command::Dataset(a) => commands::dataset(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Cluster(a) => commands::cluster(cfg, a),
        Command::Robust(a) => commands::robust(cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, doc) = failure::error_json(&e, name);
            eprintln!("{doc}");
            ExitCode::from(code)
        }
    }
}
