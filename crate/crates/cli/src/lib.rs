//! Command-line driver: synthetic data generation, per-region training,
//! threshold sweeps, inference and evaluation.
//!
//! Exit codes: 0 on success, 2 for usage and data errors, 3 when training
//! hits a non-finite loss.

pub mod commands;
pub mod config;
pub mod overlay;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mtau_core::pipeline::{RegionId, ThresholdCriterion};
use serde::Serialize;

pub use config::{ConfigFile, RunConfig};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "mtau", version, about = "Multi-threshold attention U-Net segmentation pipeline")]
pub struct Cli {
    /// Seed for data generation, splitting and weight initialization.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML or JSON configuration file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for per-region and per-case parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Write a synthetic phantom cohort in the volume container format.
    GenData(GenDataArgs),
    /// Preprocess a cohort and train the region models.
    Train(TrainArgs),
    /// Choose per-region thresholds on the validation volumes.
    SweepThreshold(SweepArgs),
    /// Segment scans with the three region models.
    Infer(InferArgs),
    /// Score predicted label volumes against ground truth.
    Evaluate(EvaluateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::SweepThreshold(_) => "sweep-threshold",
            Command::Infer(_) => "infer",
            Command::Evaluate(_) => "evaluate",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Number of phantoms.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum RegionArg {
    #[value(name = "1")]
    #[serde(rename = "1")]
    NcrNet,
    #[value(name = "2")]
    #[serde(rename = "2")]
    Edema,
    #[value(name = "4")]
    #[serde(rename = "4")]
    Enhancing,
    #[value(name = "all")]
    #[serde(rename = "all")]
    All,
}

impl RegionArg {
    pub fn regions(self) -> Vec<RegionId> {
        match self {
            RegionArg::NcrNet => vec![RegionId::NcrNet],
            RegionArg::Edema => vec![RegionId::Edema],
            RegionArg::Enhancing => vec![RegionId::Enhancing],
            RegionArg::All => RegionId::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Cohort directory written by `gen-data`.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub region: RegionArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionArg {
    Youden,
    Dice,
}

impl From<CriterionArg> for ThresholdCriterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Youden => ThresholdCriterion::Youden,
            CriterionArg::Dice => ThresholdCriterion::Dice,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Directory holding the three checkpoints.
    #[arg(long, value_name = "DIR")]
    pub models: PathBuf,
    /// Volume split; defaults to `split.json` next to the checkpoints.
    #[arg(long, value_name = "FILE")]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub criterion: Option<CriterionArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub models: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub thresholds: PathBuf,
    /// Case ids to segment; defaults to the split subset or the whole cohort.
    #[arg(long, value_delimiter = ',')]
    pub cases: Vec<String>,
    #[arg(long, value_name = "FILE")]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub subset: Subset,
    /// Also write per-slice PGM overlays.
    #[arg(long)]
    pub overlay: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Directory of predicted label volumes.
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    /// Directory holding the matching ground-truth label volumes.
    #[arg(long, value_name = "DIR")]
    pub truth: PathBuf,
    /// Report the 95th-percentile Hausdorff distance instead of the maximum.
    #[arg(long)]
    pub hd95: bool,
}

/// Parses `args` (program name first) and runs the selected subcommand.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    run(&cli)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli)?;
    match &cli.command {
        Command::GenData(_) => commands::gen_data(&cfg, &cli.out),
        Command::Train(args) => commands::train(&cfg, args, &cli.out),
        Command::SweepThreshold(args) => commands::sweep_threshold(&cfg, args, &cli.out),
        Command::Infer(args) => commands::infer(&cfg, args, &cli.out),
        Command::Evaluate(args) => commands::evaluate(&cfg, args, &cli.out),
    }
}

/// Process exit code for a failed run.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<mtau_core::Error>(), Some(mtau_core::Error::NonFiniteLoss { .. })));
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}
