use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use seqmd::datasets::{DistanceMetric, GeneratorConfig, DEFAULT_THRESHOLD};
use seqmd::evaluation::EvalOptions;
use seqmd::models::ModelDefaults;
use seqmd::training::{ExperimentConfig, TrainConfig};

use crate::CliError;

/// Everything a command can be configured with. Missing fields take their
/// defaults; the manifest records the fully materialized value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, initialization and shuffling.
    pub seed: u64,
    /// Seeds for `experiment`; every arm runs once per seed.
    pub seeds: Vec<u64>,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub models: ModelDefaults,
    pub eval: EvalOptions,
    pub tasks: usize,
    pub split_threshold: f64,
    pub split_metric: DistanceMetric,
    pub test_fraction: f64,
    /// Model labels trained by `compare`.
    pub compare_models: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            seed: 0,
            seeds: e.seeds,
            generator: e.generator,
            train: e.train,
            models: e.models,
            eval: e.eval,
            tasks: e.tasks,
            split_threshold: DEFAULT_THRESHOLD,
            split_metric: e.split_metric,
            test_fraction: e.test_fraction,
            compare_models: ["shared_bottom", "mlmmoe", "ple", "adatt_sp", "seq+md"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl RunConfig {
    /// Pins every seed-bearing field to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.generator.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seeds: self.seeds.clone(),
            generator: self.generator.clone(),
            train: self.train.clone(),
            models: self.models.clone(),
            tasks: self.tasks,
            split_threshold: self.split_threshold,
            split_metric: self.split_metric,
            test_fraction: self.test_fraction,
            eval: self.eval,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generator.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.train
            .validate(self.tasks)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction + self.train.val_fraction >= 1.0 {
            return Err(CliError::Usage(format!(
                "test_fraction {} with val_fraction {} leaves no training data",
                self.test_fraction, self.train.val_fraction
            )));
        }
        if self.eval.depth == 0 {
            return Err(CliError::Usage("eval.depth must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Command options as given, merged with those of a replayed manifest.
    pub args: Value,
    pub seed: u64,
    pub config: RunConfig,
    pub artifacts: Vec<PathBuf>,
    pub started: String,
    pub finished: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(command: &str, args: Value, config: RunConfig, artifacts: Vec<PathBuf>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args,
            seed: config.seed,
            config,
            artifacts,
            started: now(),
            finished: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(anyhow::Error::from)?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::Runtime(anyhow::anyhow!("{}: {e}", path.display())))
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// What `--config` pointed at.
pub enum Loaded {
    Config(RunConfig),
    Manifest(Box<RunManifest>),
}

/// Reads a config file or a manifest written by an earlier run.
pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{} is not valid JSON: {e}", path.display())))?;
    let is_manifest = value.get("tool").is_some() && value.get("config").is_some();
    if is_manifest {
        let m: RunManifest = serde_json::from_value(value)
            .map_err(|e| CliError::Usage(format!("bad manifest {}: {e}", path.display())))?;
        Ok(Loaded::Manifest(Box::new(m)))
    } else {
        let c: RunConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
        Ok(Loaded::Config(c))
    }
}

/// Fills options missing on the command line from a replayed manifest.
pub fn merge_args(given: Value, replayed: &Value) -> Value {
    let (Value::Object(mut given), Value::Object(old)) = (given.clone(), replayed) else {
        return given;
    };
    for (k, v) in old {
        let unset = match given.get(k) {
            None | Some(Value::Null) | Some(Value::Bool(false)) => true,
            Some(Value::Array(a)) => a.is_empty(),
            _ => false,
        };
        if unset {
            given.insert(k.clone(), v.clone());
        }
    }
    Value::Object(given)
}
