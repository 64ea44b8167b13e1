mod commands;
mod config;
mod error;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

const LEGEND: &str = "Defaults marked † are the settings published with the method; the rest are choices of this tool.\n\
Exit codes: 0 success, 2 configuration or usage error, 3 I/O or corrupt file, 4 numeric failure.";

/// Proposal refinement by relabeling, rescoring and suppression.
#[derive(Debug, Parser)]
#[command(name = "r2s", version, after_help = LEGEND)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Run configuration (JSON); flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory for all run artifacts [default: runs]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Name prefixed to artifact files [default: run]
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Worker threads [default: all cores]
    #[arg(long, global = true, env = "R2S_THREADS")]
    threads: Option<usize>,
    /// Single-threaded, ordered execution
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset, simulated detector proposals and a split
    Gen(GenArgs),
    /// Pretrain the feature network, then train the full model
    Train(TrainArgs),
    /// Refine proposals with a trained checkpoint, or run the plain-NMS baseline
    Refine(RefineArgs),
    /// Score detection files, run the head ablation grid, or compare reports
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of images [default: 200]
    #[arg(long)]
    pub images: Option<usize>,
    /// Seed of scene and proposal generation [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Probability that a proposal carries a wrong label [default: 0.1]
    #[arg(long)]
    pub flip_prob: Option<f64>,
    /// Std-dev of box jitter, as a fraction of box size [default: 0.15]
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Std-dev of the confidence noise [default: 0.1]
    #[arg(long)]
    pub conf_noise: Option<f64>,
    /// Proposals per ground truth [default: 8]
    #[arg(long)]
    pub per_gt: Option<usize>,
    /// Background clusters per image [default: 2]
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Share of images in the training split [default: 0.75 †]
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ShapeArgs {
    /// Proposals fed to the network per image [default: 30 †]
    #[arg(long)]
    pub k: Option<usize>,
    /// Side of the square feature grid W=H [default: 32 †]
    #[arg(long)]
    pub grid: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PassArg {
    Bfnet,
    Full,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    /// 32-bit floats
    Fast,
    /// 64-bit floats, for reproducibility checks
    Test,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shape: ShapeArgs,
    /// Epochs per pass [default: 60 †]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Images per batch [default: 16 †]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seed of initialization and data order [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Arithmetic width [default: fast]
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Which training passes to run
    #[arg(long, value_enum, default_value_t = PassArg::Both)]
    pub pass: PassArg,
    /// Pretrained checkpoint for `--pass full` [default: <out>/<run_id>_bfnet]
    #[arg(long, value_name = "DIR")]
    pub init: Option<PathBuf>,
    /// Loss terms to leave out of the full pass (cls, res, sup)
    #[arg(long, value_delimiter = ',')]
    pub disable_loss: Vec<String>,
    /// Also write the loss curves as SVG
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub shape: ShapeArgs,
    /// Trained checkpoint [default: <out>/<run_id>_ckpt]
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    /// Plain NMS on raw proposals instead (rho_iou 0.5 †, rho_c 0.75 †)
    #[arg(long)]
    pub baseline: bool,
    /// Images to process
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Detections file [default: <out>/<run_id>_detections.jsonl, or _baseline.jsonl]
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    /// Heads to apply (relabel, rescore, suppress) [default: all three]
    #[arg(long, value_delimiter = ',')]
    pub heads: Option<Vec<String>>,
    /// NMS overlap threshold after refinement [default: 0.5 †]
    #[arg(long)]
    pub rho_iou: Option<f64>,
    /// NMS confidence threshold after refinement [default: 0.5 †]
    #[arg(long)]
    pub rho_c: Option<f64>,
    /// Suppress when the background probability exceeds this [default: 0.5]
    #[arg(long)]
    pub suppress_threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detection files to score; each becomes one variant
    #[arg(long, num_args = 1.., value_name = "FILE")]
    pub detections: Vec<PathBuf>,
    /// Run the on/off grid over these heads with a checkpoint (relabel, rescore, suppress)
    #[arg(long, value_delimiter = ',', conflicts_with = "detections")]
    pub ablate: Option<Vec<String>>,
    #[command(flatten)]
    pub shape: ShapeArgs,
    /// Checkpoint for `--ablate` [default: <out>/<run_id>_ckpt]
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    /// Print summary deltas between two metrics CSV files (B minus A)
    #[arg(long, num_args = 2, value_names = ["A", "B"], conflicts_with_all = ["detections", "ablate"])]
    pub compare: Option<Vec<PathBuf>>,
    /// Minimum IoU for a match [default: 0.5 †]
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    /// Report file [default: <out>/<run_id>_metrics.csv]
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
    /// Also write precision/recall curves as SVG
    #[arg(long)]
    pub svg: bool,
}

fn run(cli: Cli) -> CliResult<()> {
    let g = cli.global;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = g.out {
        cfg.out_dir = o;
    }
    if let Some(r) = g.run_id {
        cfg.run_id = r;
    }
    let threads = if g.deterministic { Some(1) } else { g.threads };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Gen(a) => commands::gen(cfg, &a),
        Command::Train(a) => commands::train(cfg, &a),
        Command::Refine(a) => commands::refine(cfg, &a),
        Command::Eval(a) => commands::eval(cfg, &a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
