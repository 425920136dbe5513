//! Run configuration: built-in defaults, then the config file, then flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mtau_core::model::ModelConfig;
use mtau_core::pipeline::ThresholdCriterion;
use mtau_core::synth::PhantomSpec;
use mtau_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{Cli, Command};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// Model section of a config file: a named preset or a full architecture.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ModelSection {
    Preset { preset: String },
    Explicit(ModelConfig),
}

impl ModelSection {
    fn resolve(&self) -> Result<ModelConfig> {
        match self {
            ModelSection::Preset { preset } => match preset.as_str() {
                "desk" => Ok(ModelConfig::desk()),
                "paper" => Ok(ModelConfig::paper()),
                other => bail!("unknown model preset {other:?}; expected \"desk\" or \"paper\""),
            },
            ModelSection::Explicit(cfg) => {
                cfg.validate()?;
                Ok(cfg.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub split: Option<[f64; 3]>,
    pub criterion: Option<ThresholdCriterion>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n: Option<usize>,
    pub phantom: Option<PhantomSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
}

impl ConfigFile {
    /// Reads JSON when the extension is `.json`, TOML otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
        } else {
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Train/validation/test fractions of the volumes.
    pub split: [f64; 3],
    pub criterion: ThresholdCriterion,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSettings {
    pub n: usize,
    pub phantom: PhantomSpec,
}

/// Fully resolved settings, echoed to `run_config.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub args: serde_json::Value,
    pub seed: u64,
    pub threads: usize,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub data: DataSettings,
}

impl RunConfig {
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let file = match &cli.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        let defaults = TrainConfig::default();
        let mut train = TrainSettings {
            learning_rate: file.train.learning_rate.unwrap_or(defaults.learning_rate),
            epochs: file.train.epochs.unwrap_or(defaults.epochs),
            batch_size: file.train.batch_size.unwrap_or(defaults.batch_size),
            split: file.train.split.unwrap_or([0.64, 0.16, 0.2]),
            criterion: file.train.criterion.unwrap_or_default(),
        };
        let mut data = DataSettings { n: file.data.n.unwrap_or(50), phantom: file.data.phantom.unwrap_or_default() };
        match &cli.command {
            Command::GenData(a) => data.n = a.n.unwrap_or(data.n),
            Command::Train(a) => {
                train.learning_rate = a.learning_rate.unwrap_or(train.learning_rate);
                train.epochs = a.epochs.unwrap_or(train.epochs);
                train.batch_size = a.batch_size.unwrap_or(train.batch_size);
            }
            Command::SweepThreshold(a) => {
                if let Some(c) = a.criterion {
                    train.criterion = c.into();
                }
            }
            Command::Infer(_) | Command::Evaluate(_) => {}
        }
        let threads = cli
            .threads
            .or(file.threads)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if threads == 0 {
            bail!("--threads must be at least 1");
        }
        let model = match &file.model {
            Some(section) => section.resolve()?,
            None => ModelConfig::desk(),
        };
        let cfg = RunConfig {
            command: cli.command.name().to_string(),
            args: serde_json::to_value(&cli.command)?,
            seed: cli.seed.or(file.seed).unwrap_or(0),
            threads,
            model,
            train,
            data,
        };
        cfg.train_config(None).validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, checkpoint_dir: Option<&Path>) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            checkpoint_dir: checkpoint_dir.map(Path::to_path_buf),
            ..TrainConfig::default()
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_CONFIG_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
