use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use relockit::averaging::RotationMode;
use relockit::metrics::Reducer;
use relockit::regressor::HeadMode;
use relockit::synthetic::Layout;

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "relockit",
    version,
    about = "Relative-pose relocalization toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Localize queries from database poses, retrieved pairs and relative-pose estimates.
    Localize(LocalizeArgs),
    /// Score predicted relative poses against ground truth (AUC, RRA/RTA, mAA).
    EvalRelpose(EvalArgs),
    /// Write a synthetic scene: database poses, pairs, noisy estimates and ground truth.
    Synth(SynthArgs),
    /// Monte-Carlo study of median vs mean rotation averaging against K.
    AvgBench(BenchArgs),
    /// Overfit the toy two-view regressor on procedural image pairs.
    ToyTrain(TrainArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Json,
}

#[derive(Args, Debug)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub estimates: PathBuf,
    /// Report file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "median", value_parser = parse_mode)]
    pub averaging: RotationMode,
    /// Ground-truth query poses; adds per-query and median errors to the report.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value = "max", value_parser = parse_reducer)]
    pub reducer: Reducer,
    /// AUC thresholds in degrees.
    #[arg(long, default_value = "5,10,20", value_parser = parse_thresholds)]
    pub thresholds: Thresholds,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value = "general", value_parser = parse_layout)]
    pub layout: Layout,
    #[arg(long, default_value_t = 10)]
    pub n_db: usize,
    #[arg(long, default_value_t = 20)]
    pub n_query: usize,
    /// Rotation noise sigma, degrees.
    #[arg(long, default_value_t = 0.0)]
    pub noise_rot: f64,
    /// Translation direction noise sigma, degrees.
    #[arg(long, default_value_t = 0.0)]
    pub noise_dir: f64,
    #[arg(long, default_value_t = 0.0)]
    pub outlier_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub topk: usize,
    /// Side length of the cube holding the cameras, meters.
    #[arg(long, default_value_t = 10.0)]
    pub extent: f64,
    #[arg(long)]
    pub out_prefix: String,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value = "2,5,10", value_parser = parse_k_list)]
    pub k_list: KList,
    /// Rotation noise sigma, degrees.
    #[arg(long, default_value_t = 2.0)]
    pub noise_rot: f64,
    /// Direction noise sigma in degrees; defaults to the rotation sigma.
    #[arg(long)]
    pub noise_dir: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub outlier_fraction: f64,
    /// Rotation outlier angle, degrees.
    #[arg(long, default_value_t = 90.0)]
    pub outlier_angle: f64,
    /// Database cameras per trial scene.
    #[arg(long, default_value_t = 50)]
    pub db_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "9d", value_parser = parse_head)]
    pub head: HeadMode,
    /// Number of training pairs.
    #[arg(long, default_value_t = 8)]
    pub pairs: usize,
    /// Side length of the square procedural images, pixels.
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV output path.
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Clone, Debug)]
pub struct Thresholds(pub Vec<f64>);

#[derive(Clone, Debug)]
pub struct KList(pub Vec<usize>);

fn parse_mode(s: &str) -> Result<RotationMode, String> {
    s.parse()
}

fn parse_reducer(s: &str) -> Result<Reducer, String> {
    s.parse()
}

fn parse_layout(s: &str) -> Result<Layout, String> {
    s.parse()
}

fn parse_head(s: &str) -> Result<HeadMode, String> {
    s.parse()
}

fn parse_thresholds(s: &str) -> Result<Thresholds, String> {
    let values = s
        .split(',')
        .map(|v| {
            let t: f64 = v
                .trim()
                .parse()
                .map_err(|_| format!("`{v}` is not a number"))?;
            if t.is_finite() && t > 0.0 {
                Ok(t)
            } else {
                Err(format!("threshold {t} must be positive"))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Thresholds(values))
}

fn parse_k_list(s: &str) -> Result<KList, String> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| format!("`{v}` is not a count"))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(KList)
}

/// What the command produced, for the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Complete,
    /// Some queries failed or training diverged.
    Partial,
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("RELOC_KIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().with_context(|| {
        format!("RELOC_KIT_THREADS must be a non-negative integer, got `{raw}`")
    })?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<Status> {
    configure_threads()?;
    match cli.command {
        Command::Localize(a) => commands::localize(&a),
        Command::EvalRelpose(a) => commands::eval_relpose(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::AvgBench(a) => {
            if a.k_list.0.is_empty() {
                bail!("--k-list must not be empty");
            }
            commands::avg_bench(&a)
        }
        Command::ToyTrain(a) => commands::toy_train(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Usage errors exit with 1 like any other input error; 2 is reserved
    // for partial results.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(Status::Complete) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
