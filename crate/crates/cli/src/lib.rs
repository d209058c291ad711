//! The `seqmd` command line: generate data, split features, train,
//! evaluate, compare models and run the experiment suite.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub use commands::run;
pub use config::{RunConfig, RunManifest};

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration: exit code 2.
    Usage(String),
    /// Anything that went wrong while doing the work: exit code 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "seqmd", version, about = "Sequential multi-task ranking with a region adaptor")]
pub struct Cli {
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config, or the manifest of an earlier run to replay.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "seqmd-out")]
    pub out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-region dataset.
    Generate(GenerateArgs),
    /// Split features into country / dependent / invariant columns.
    Split(SplitArgs),
    /// Train one model and save its checkpoint.
    Train(TrainArgs),
    /// Score checkpoints on the test groups.
    Eval(EvalArgs),
    /// Train several models on the same data and report deltas.
    Compare(CompareArgs),
    /// Run one of the multi-seed experiments.
    Experiment(ExperimentArgs),
    /// Print parameter counts and their growth with the task count.
    Params(ParamsArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Split(_) => "split",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Compare(_) => "compare",
            Command::Experiment(_) => "experiment",
            Command::Params(_) => "params",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum ArchArg {
    Seq,
    SharedBottom,
    Mlmmoe,
    Ple,
    AdattSp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum MdArg {
    None,
    InputPlug,
    InSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum MetricArg {
    Ks,
    Wasserstein,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum ExperimentArg {
    RegularizerAblation,
    #[value(name = "transfer_2to3")]
    #[serde(rename = "transfer_2to3")]
    Transfer2to3,
    SingleVsAllRegion,
    MdPlugplay,
}

fn task_count(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(k @ 2..=3) => Ok(k),
        _ => Err(format!("task count must be 2 or 3, got '{s}'")),
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    /// Query groups to draw.
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SplitArgs {
    /// JSONL dataset; generated from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ArchArg>,
    #[arg(long, value_enum)]
    pub md: Option<MdArg>,
    #[arg(long, value_parser = task_count)]
    pub tasks: Option<usize>,
    /// Train SEQ without the descending probability regularizer.
    #[arg(long)]
    pub no_regularizer: bool,
    /// Feature split written by `split`; computed on the fly otherwise.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Train on one buyer region only.
    #[arg(long)]
    pub region: Option<u32>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to score; repeat for several. One must be shared-bottom.
    #[arg(long = "checkpoint", required = false)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Graded 0/1/2/4 gains instead of binary per-task labels.
    #[arg(long)]
    pub graded: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated model labels, e.g. shared_bottom,ple+md,seq+md.
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<String>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long, value_parser = task_count)]
    pub tasks: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ExperimentArgs {
    #[arg(value_enum)]
    pub name: Option<ExperimentArg>,
    /// Comma-separated seeds; defaults to the config's.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ParamsArgs {
    /// An architecture name or `all`.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_enum)]
    pub md: Option<MdArg>,
    /// Comma-separated task counts, e.g. 2,3.
    #[arg(long, value_delimiter = ',', value_parser = task_count)]
    pub tasks: Vec<usize>,
}
