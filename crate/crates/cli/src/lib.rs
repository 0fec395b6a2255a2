//! The `sghmm` command line: `generate`, `fit`, `eval` and `lyapunov`.

pub mod commands;
pub mod io;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sghmm::{BufferMode, DatasetKind, Error, Family, GapMode};

#[derive(Debug, Parser)]
#[command(name = "sghmm", version, about = "Stochastic-gradient MCMC for hidden Markov models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic dataset and write it with its true parameters.
    Generate(GenerateArgs),
    /// Run a sampler and write its trace.
    Fit(FitArgs),
    /// Predictive and transition-error metrics, or model selection over K.
    Eval(EvalArgs),
    /// Lyapunov exponent, recommended buffer and mixing time as JSON.
    Lyapunov(LyapunovArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SeqFormat {
    Bin,
    Csv,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long, value_parser = parse_kind)]
    pub kind: DatasetKind,
    #[arg(long = "T")]
    pub t: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SeqFormat::Bin)]
    pub format: SeqFormat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Minibatch SG-RLD.
    Sg,
    /// Full-gradient RLD.
    Batch,
    /// SG-RLD on an i.i.d. mixture.
    Iid,
}

/// Sampler settings. Anything left unset falls back to the config file,
/// then to the library defaults.
#[derive(Clone, Debug, Default, Args, Serialize)]
pub struct SamplerFlags {
    /// JSON or TOML file holding a run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_family)]
    pub family: Option<Family>,
    #[arg(long = "L")]
    pub half_width: Option<usize>,
    #[arg(long)]
    pub batch_count: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub emission_step_size: Option<f64>,
    #[arg(long)]
    pub n_iter: Option<usize>,
    #[arg(long)]
    pub n_steps: Option<usize>,
    /// `adaptive`, `none` or `fixed:B`.
    #[arg(long, value_parser = parse_buffer)]
    pub buffer: Option<BufferMode>,
    /// `adaptive` or `fixed:G`.
    #[arg(long, value_parser = parse_gap)]
    pub gap: Option<GapMode>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate window gradients on the rayon pool.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Sg)]
    pub method: Method,
    /// Number of hidden states.
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    /// Fraction of the sequence, taken from the end, kept out of training.
    #[arg(long, default_value_t = 0.0)]
    pub holdout: f64,
    #[arg(long, default_value_t = 10)]
    pub horizon: usize,
    /// Predictive evaluation points in the held-out tail.
    #[arg(long, default_value_t = 100)]
    pub eval_points: usize,
    /// Score every stored sample on the held-out tail and write `curve.csv`.
    #[arg(long)]
    pub emit_plot_data: bool,
    /// True parameters, used for the transition error column of `curve.csv`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trace NDJSON; its tail is averaged into a point estimate.
    #[arg(long, conflicts_with = "params")]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Parameters JSON or trace NDJSON to measure transition error against.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Fraction of the trace averaged for the point estimate.
    #[arg(long, default_value_t = 0.5)]
    pub tail: f64,
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    #[arg(long, default_value_t = 10)]
    pub horizon: usize,
    #[arg(long, default_value_t = 100)]
    pub eval_points: usize,
    /// Method label for the metrics table.
    #[arg(long)]
    pub label: Option<String>,
    /// Fit each K on the training part and rank by held-out score.
    #[arg(long)]
    pub model_select: bool,
    /// Candidate state counts for model selection.
    #[arg(long = "K", value_delimiter = ',', default_values_t = [1usize, 2, 3, 4])]
    pub ks: Vec<usize>,
    /// Families compared in model selection.
    #[arg(long, value_delimiter = ',', value_parser = parse_family)]
    pub families: Vec<Family>,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct LyapunovArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    pub n_iter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub delta: f64,
    #[arg(long, default_value_t = 2.0)]
    pub delta0: f64,
    #[arg(long, default_value_t = 100)]
    pub b_max: usize,
    /// Also write the report and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<DatasetKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn parse_buffer(s: &str) -> Result<BufferMode, String> {
    match s {
        "adaptive" => Ok(BufferMode::Adaptive),
        "none" => Ok(BufferMode::None),
        _ => s
            .strip_prefix("fixed:")
            .and_then(|b| b.parse().ok())
            .map(BufferMode::Fixed)
            .ok_or_else(|| format!("expected adaptive, none or fixed:B, got {s:?}")),
    }
}

pub fn parse_gap(s: &str) -> Result<GapMode, String> {
    match s {
        "adaptive" => Ok(GapMode::Adaptive),
        _ => s
            .strip_prefix("fixed:")
            .and_then(|b| b.parse().ok())
            .map(GapMode::Fixed)
            .ok_or_else(|| format!("expected adaptive or fixed:G, got {s:?}")),
    }
}

/// 2 for configuration and validation errors, 3 numeric, 4 capacity,
/// 1 for files that cannot be read or parsed.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation { .. } | Error::Config(_) | Error::Index(_) => 2,
        Error::Numeric { .. } => 3,
        Error::Capacity { .. } => 4,
        Error::Io { .. } | Error::Format { .. } => 1,
    }
}

/// Sizes the global rayon pool from `SGHMM_THREADS` if set.
pub fn init_threads() -> sghmm::Result<()> {
    let Ok(v) = std::env::var("SGHMM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("SGHMM_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

pub fn run(cli: Cli) -> sghmm::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Lyapunov(a) => commands::lyapunov(&a),
    }
}
