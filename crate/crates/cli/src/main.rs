//! `sddprobe`: synthetic corpora, feature extraction, augmentation plans,
//! multi-seed training, sweeps, voting ensembles and reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Bad invocation or configuration; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "sddprobe", version, about = "Block-wise probing and depression detection experiments")]
pub struct Cli {
    /// Feature store root; overrides the experiment file.
    #[arg(long, global = true, env = "SDDPROBE_STORE_ROOT")]
    pub store: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus, cache its features and write a starter experiment.
    Synth(SynthArgs),
    /// Extract, pool and cache features for the train and dev splits.
    Extract(ExtractArgs),
    /// Write a sub-dialogue augmentation plan.
    Plan(PlanArgs),
    /// Train one detector per seed and aggregate dev F1.
    Train(TrainArgs),
    /// Run the seed protocol along the block or M+ axis.
    Sweep(SweepArgs),
    /// Majority-vote an odd number of trained systems, paired by seed index.
    Ensemble(EnsembleArgs),
    /// Write summary.csv, summary.json and trend.svg from sweep results.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for manifest.jsonl, synthetic.json and experiment.toml.
    #[arg(long)]
    pub out: PathBuf,
    /// Synthetic corpus settings (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_pos: Option<usize>,
    #[arg(long)]
    pub n_neg: Option<usize>,
    #[arg(long)]
    pub dev_pos: Option<usize>,
    #[arg(long)]
    pub dev_neg: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Class separation in noise standard deviations.
    #[arg(long)]
    pub signal: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Per-block signal gain as BLOCK=GAIN; repeatable.
    #[arg(long = "block-gain", value_parser = parse_block_gain)]
    pub block_gains: Vec<(u32, f64)>,
    #[arg(long)]
    pub force: bool,
}

fn parse_block_gain(s: &str) -> Result<(u32, f64), String> {
    let (b, g) = s.split_once('=').ok_or("expected BLOCK=GAIN")?;
    Ok((
        b.trim().parse().map_err(|_| format!("bad block {b:?}"))?,
        g.trim().parse().map_err(|_| format!("bad gain {g:?}"))?,
    ))
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractKind {
    Synthetic,
    Speech,
    Text,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterArg {
    ParticipantOnly,
    All,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "synthetic")]
    pub kind: ExtractKind,
    /// Backend name recorded in the store (speech and text).
    #[arg(long)]
    pub name: Option<String>,
    /// Synthetic settings file; defaults to synthetic.json next to the manifest.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    /// Root of dumped per-utterance hidden states (speech).
    #[arg(long)]
    pub states: Option<PathBuf>,
    /// Blocks to cache (speech), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub blocks: Vec<u32>,
    /// Encoder depth (speech).
    #[arg(long, default_value_t = 12)]
    pub depth: u32,
    /// Feature width (speech and text).
    #[arg(long, default_value_t = 768)]
    pub dim: usize,
    /// Token-embedding seed (text).
    #[arg(long, default_value_t = 0)]
    pub text_seed: u64,
    /// Concatenate cached store keys (name@bK, comma separated) instead of extracting.
    #[arg(long, value_delimiter = ',')]
    pub fuse: Vec<String>,
    #[arg(long, value_enum, default_value = "participant-only")]
    pub filter: FilterArg,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Corrected,
    Literal,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Experiment file whose [augment] section supplies defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub m_plus: Option<usize>,
    #[arg(long)]
    pub eps_low: Option<f64>,
    #[arg(long)]
    pub eps_high: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub filter: Option<FilterArg>,
    #[arg(long)]
    pub force: bool,
}

/// Flags shared by `train` and `sweep`; each overrides the experiment file.
#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Explicit seed list, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["seed", "n_seeds"])]
    pub seeds: Option<Vec<u64>>,
    /// First seed; seeds are consecutive from here.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of seeds.
    #[arg(long)]
    pub n_seeds: Option<u64>,
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub block: Option<u32>,
    #[arg(long)]
    pub m_plus: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Concurrent training runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Use this plan file instead of building one.
    #[arg(long)]
    pub plan: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisArg {
    Block,
    MPlus,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long, value_enum)]
    pub axis: AxisArg,
    /// Axis values, comma separated; defaults to the [sweep] section.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<u64>,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    /// Protocol directories (each holding stats.json and seed_* runs).
    #[arg(required = true)]
    pub members: Vec<PathBuf>,
    /// Also write the fused statistics to this JSON file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Sweep results as [NAME=]PATH, PATH being a sweep.json or a directory holding one.
    #[arg(required = true)]
    pub inputs: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some()
        || matches!(err.downcast_ref::<sddprobe::Error>(), Some(sddprobe::Error::Config(_)))
    {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            let line = serde_json::json!({
                "status": "error",
                "kind": if code == 2 { "usage" } else { "runtime" },
                "message": format!("{err:#}"),
            });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
