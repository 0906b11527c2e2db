//! Run configuration: defaults < `SKELFREE_*` environment < config file <
//! command-line flags.
//!
//! Environment keys use `__` as the section separator, e.g.
//! `SKELFREE_TRAIN__LR_MAX=1e-3`. Flags are applied as dotted-key
//! overrides; `--set key.path=value` reaches any field.

use std::path::{Path, PathBuf};

use figment::providers::{Env, Format, Serialized, Toml};
use figment::Figment;
use serde::{Deserialize, Serialize};
use skelfree::model::ModelConfig;
use skelfree::tasks::{DEFAULT_PROPORTIONS, DEFAULT_SIGMAS_CM};
use skelfree::training::TrainConfig;

use crate::error::CliError;

pub const ENV_PREFIX: &str = "SKELFREE_";
pub const PROVENANCE_FILE: &str = "run_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; required by every command that draws random numbers.
    pub seed: Option<u64>,
    pub device: String,
    pub out: Option<PathBuf>,
    /// Input dataset directory.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: bool,
    /// Raw clip files for `prepare`.
    pub inputs: Vec<PathBuf>,
    /// Latent directory for `decode`.
    pub latents: Option<PathBuf>,
    /// Template id in the dataset or a built-in topology name.
    pub target: Option<String>,
    pub select: SelectConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prepare: PrepareConfig,
    pub synth: SynthConfig,
    pub tasks: TaskConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            device: "cpu".into(),
            out: None,
            data: None,
            checkpoint: None,
            resume: false,
            inputs: Vec::new(),
            latents: None,
            target: None,
            select: SelectConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            prepare: PrepareConfig::default(),
            synth: SynthConfig::default(),
            tasks: TaskConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Which dataset chunks a command processes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    /// `all`, `train` or `validation`.
    pub split: String,
    /// Explicit chunk indices; overrides `split` when non-empty.
    pub chunks: Vec<usize>,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig { split: "all".into(), chunks: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub fps: f64,
    pub validation_fraction: f64,
    pub holdout_topology: Option<String>,
    /// Up axis of the input files: `z` or `y`.
    pub up_axis: String,
    /// Meters per input unit.
    pub unit_scale: f64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig { fps: 30.0, validation_fraction: 0.1, holdout_topology: None, up_axis: "z".into(), unit_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Emit the fixed twenty-chunk training fixture instead of `clips`.
    pub fixture: bool,
    pub clips: usize,
    pub duration: f64,
    pub framerate: f64,
    /// `dataset` or `bvh`.
    pub format: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { fixture: false, clips: 10, duration: 4.0, framerate: 30.0, format: "dataset".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Overlapping-window inference for `retarget`.
    pub windowed: bool,
    pub window: usize,
    pub stride: usize,
    pub restore_trajectory: bool,
    /// Noise added before `denoise`, in centimeters.
    pub sigma_cm: Option<f64>,
    /// Kept-joint proportion for `upsample`.
    pub proportion: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { windowed: true, window: 30, stride: 6, restore_trajectory: true, sigma_cm: None, proportion: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Any of `representation`, `denoising`, `upsampling`.
    pub protocols: Vec<String>,
    pub sigmas_cm: Vec<f64>,
    pub proportions: Vec<f64>,
    /// Any of `csv`, `svg`.
    pub formats: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocols: vec!["representation".into(), "denoising".into(), "upsampling".into()],
            sigmas_cm: DEFAULT_SIGMAS_CM.to_vec(),
            proportions: DEFAULT_PROPORTIONS.to_vec(),
            formats: vec!["csv".into(), "svg".into()],
        }
    }
}

/// Dotted-key overrides collected from command-line flags.
#[derive(Clone, Debug, Default)]
pub struct Overrides(Vec<(String, toml::Value)>);

impl Overrides {
    pub fn set(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.0.push((key.to_string(), value.into()));
    }

    pub fn set_opt<T: Into<toml::Value>>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    /// Parses `key.path=value`; the value is read as a TOML literal, or as a
    /// string when it is not one.
    pub fn parse_assignment(&mut self, text: &str) -> Result<(), CliError> {
        let (key, raw) = text
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("`{text}` is not KEY=VALUE")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        self.set(key.trim(), value);
        Ok(())
    }
}

const TOP_LEVEL_KEYS: [&str; 17] = [
    "seed", "device", "out", "data", "checkpoint", "resume", "inputs", "latents", "target", "select", "model", "train",
    "prepare", "synth", "tasks", "eval", "config",
];

/// Merges all layers into a validated config.
pub fn resolve(config_file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let env = Env::prefixed(ENV_PREFIX)
        .filter(|k| {
            let top = k.as_str().split("__").next().unwrap_or("").to_ascii_lowercase();
            top != "config" && TOP_LEVEL_KEYS.contains(&top.as_str())
        })
        .split("__");
    let mut fig = Figment::from(Serialized::defaults(RunConfig::default())).merge(env);
    if let Some(path) = config_file {
        if !path.is_file() {
            return Err(CliError::Usage(format!("config file {} not found", path.display())));
        }
        fig = fig.merge(Toml::file(path));
    }
    for (k, v) in &overrides.0 {
        fig = fig.merge(Serialized::global(k, v));
    }
    let cfg: RunConfig = fig.extract()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Config file path from the environment when no `--config` flag is given.
pub fn env_config_file() -> Option<PathBuf> {
    std::env::var_os(format!("{ENV_PREFIX}CONFIG")).map(PathBuf::from)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.device != "cpu" {
            return Err(CliError::Usage(format!("device `{}` is not available; only `cpu` is supported", self.device)));
        }
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if !["all", "train", "validation"].contains(&self.select.split.as_str()) {
            return Err(CliError::Usage(format!("unknown split `{}`", self.select.split)));
        }
        if !["z", "y"].contains(&self.prepare.up_axis.as_str()) {
            return Err(CliError::Usage(format!("up axis must be `z` or `y`, got `{}`", self.prepare.up_axis)));
        }
        if !["dataset", "bvh"].contains(&self.synth.format.as_str()) {
            return Err(CliError::Usage(format!("unknown synth format `{}`", self.synth.format)));
        }
        for p in &self.eval.protocols {
            if !["representation", "denoising", "upsampling"].contains(&p.as_str()) {
                return Err(CliError::Usage(format!("unknown protocol `{p}`")));
            }
        }
        for f in &self.eval.formats {
            if !["csv", "svg"].contains(&f.as_str()) {
                return Err(CliError::Usage(format!("unknown report format `{f}`")));
            }
        }
        Ok(())
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::Usage("this command needs a seed (--seed, config `seed` or SKELFREE_SEED)".into()))
    }

    pub fn require_out(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| CliError::Usage("missing output directory (--out)".into()))
    }

    pub fn require_data(&self) -> Result<&Path, CliError> {
        self.data.as_deref().ok_or_else(|| CliError::Usage("missing dataset directory (--data)".into()))
    }

    pub fn require_checkpoint(&self) -> Result<&Path, CliError> {
        self.checkpoint.as_deref().ok_or_else(|| CliError::Usage("missing checkpoint (--checkpoint)".into()))
    }

    /// Writes the resolved config into `dir`, headed by the command line
    /// that produced it.
    pub fn write_provenance(&self, dir: &Path, command: &str) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        let body = toml::to_string(self).map_err(|e| CliError::Usage(e.to_string()))?;
        std::fs::write(dir.join(PROVENANCE_FILE), format!("# skelfree {command}\n{body}"))?;
        Ok(())
    }
}
