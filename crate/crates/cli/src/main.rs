//! `edgenav`: dataset generation, detector training and distillation,
//! policy training, evaluation, benchmarking and checkpoint inspection.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(edgenav::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<edgenav::Error> for CliError {
    fn from(e: edgenav::Error) -> Self {
        match e {
            edgenav::Error::Config(m) => CliError::Usage(format!("invalid configuration: {m}")),
            other => CliError::Runtime(other),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "edgenav", version, about = "Selective-scan detectors and goal navigation on synthetic rooms")]
pub struct Cli {
    /// TOML configuration; command-line flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a labeled dataset and write its summary CSV.
    GenData(GenData),
    /// Train the teacher detector on the detection loss.
    TrainTeacher(TrainDetector),
    /// Train the student detector, by default against a frozen teacher.
    Distill(Distill),
    /// mAP@0.5 of a detector checkpoint on a dataset split.
    EvalMap(EvalMap),
    /// Train a navigation policy with PPO.
    TrainPolicy(TrainPolicy),
    /// Greedy success rate of a policy checkpoint.
    EvalNav(EvalNav),
    /// Single-image latency at 32-bit, as CSV and a table.
    Bench(Bench),
    /// Header, tensors and integrity of a checkpoint.
    InspectCkpt(InspectCkpt),
    /// Whitespace-separated columns of a CSV log, for gnuplot.
    PlotData(PlotData),
}

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    /// Image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainOpts {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Per-epoch CSV log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Args, Debug)]
pub struct TrainDetector {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Args, Debug)]
pub struct Distill {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Teacher checkpoint; required unless `--no-kd`.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Train the student on the detection loss alone.
    #[arg(long)]
    pub no_kd: bool,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub lambda_kd: Option<f64>,
    #[arg(long)]
    pub lambda_feat: Option<f64>,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Args, Debug)]
pub struct EvalMap {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: Split,
    /// Write detections above the lower confidence threshold as JSON lines.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainPolicy {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub objects: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Per-iteration CSV log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Observe through this detector instead of the ground-truth boxes.
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Args, Debug)]
pub struct EvalNav {
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub objects: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long)]
    pub detector: Option<PathBuf>,
    /// JSON-lines trace of the first episode.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Student,
    Teacher,
}

#[derive(Args, Debug)]
pub struct Bench {
    /// Detector checkpoints to time; repeatable.
    #[arg(long)]
    pub ckpt: Vec<PathBuf>,
    /// Freshly initialized presets to time; repeatable.
    #[arg(long, value_enum)]
    pub model: Vec<Preset>,
    /// Input side for `--model` presets.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Also write the CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectCkpt {
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlotData {
    #[arg(long)]
    pub csv: PathBuf,
    /// Column for the x axis.
    #[arg(long)]
    pub x: String,
    /// Columns for the y axes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub y: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
