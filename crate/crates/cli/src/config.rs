//! Run configuration: one TOML document with a section per stage.

use std::path::{Path, PathBuf};

use conceptlab::data::{preset, PRESETS};
use conceptlab::erasure::{EraseConfig, GuidanceConfig};
use conceptlab::eval::EvalConfig;
use conceptlab::model::{ArchitectureConfig, TrainConfig};
use conceptlab::oracle::MixtureSpec;
use conceptlab::schedule::{SamplerConfig, ScheduleConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "CONCEPTLAB_OUT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for training, erasure and sampling.
    pub seed: u64,
    /// Output directory; falls back to `$CONCEPTLAB_OUT/<command>`, then
    /// `runs/<command>`.
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub inputs: Inputs,
    pub model: ArchitectureConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub erase: EraseConfig,
    pub monitor: MonitorConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub compare: CompareConfig,
}

/// Where the data distribution comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Named preset; ignored when `spec` is set.
    pub preset: String,
    /// Mixture specification as JSON.
    pub spec: Option<PathBuf>,
    /// Number of points drawn by `datagen` (and by `train-base` when no
    /// dataset file is given).
    pub n: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: "four-corners".into(),
            spec: None,
            n: 50_000,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn mixture(&self) -> Result<MixtureSpec, CliError> {
        match &self.spec {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                let spec = MixtureSpec::from_json(&text)?;
                spec.validate()?;
                Ok(spec)
            }
            None => Ok(preset(&self.preset)?),
        }
    }
}

/// Files produced by earlier commands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    /// Dataset for `train-base`.
    pub dataset: Option<PathBuf>,
    /// Base checkpoint for `erase`, `eval` (paired metrics) and `compare`.
    pub base: Option<PathBuf>,
    /// Model under study for `sample` and `eval`.
    pub model: Option<PathBuf>,
    /// Checkpoint with optimizer state to continue `train-base` from.
    pub resume: Option<PathBuf>,
    /// One erased checkpoint per concept, in concept order, for the
    /// interference matrix in `eval`.
    pub erased: Vec<PathBuf>,
}

/// Metrics recorded during `erase` at the checkpoint cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    pub enabled: bool,
    /// Samples per reading.
    pub n_samples: usize,
    /// Write student/teacher checkpoints at every reading.
    pub save_checkpoints: bool,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_samples: 300,
            save_checkpoints: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub n: usize,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceConfig,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            sampler: SamplerConfig::default(),
            guidance: GuidanceConfig::cfg(vec![1], 7.5),
        }
    }
}

/// Methods compared side by side on the erasure targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    /// Any of `base`, `sdd`, `esd_x`, `esd_u`, `esd_all`, `neg_prompt`,
    /// `sld`, `sega`. The base row is always included.
    pub methods: Vec<String>,
    /// Pre-computed erased checkpoints; missing ones are trained in-process
    /// from `inputs.base` with the `erase` section.
    pub sdd: Option<PathBuf>,
    pub esd_x: Option<PathBuf>,
    pub esd_u: Option<PathBuf>,
    pub esd_all: Option<PathBuf>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            methods: ["base", "sdd", "esd_x", "neg_prompt", "sld", "sega"]
                .map(String::from)
                .to_vec(),
            sdd: None,
            esd_x: None,
            esd_u: None,
            esd_all: None,
        }
    }
}

pub const COMPARE_METHODS: [&str; 8] = [
    "base",
    "sdd",
    "esd_x",
    "esd_u",
    "esd_all",
    "neg_prompt",
    "sld",
    "sega",
];

impl RunConfig {
    /// Parses a TOML document, applies `key.path=value` overrides and
    /// rejects unknown keys.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Config(format!("config file: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))
    }

    pub fn from_file(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => String::new(),
        };
        Self::load(&text, overrides)
    }

    /// Checks every section before any computation starts.
    pub fn validate(&self) -> Result<MixtureSpec, CliError> {
        if self.data.spec.is_none() && !PRESETS.contains(&self.data.preset.as_str()) {
            return Err(CliError::Config(format!(
                "unknown preset {:?}; expected one of {PRESETS:?}",
                self.data.preset
            )));
        }
        let mix = self.data.mixture()?;
        if self.data.n == 0 {
            return Err(CliError::Config("data.n must be >= 1".into()));
        }
        self.model.validate()?;
        if self.model.data_dim != mix.dim {
            return Err(CliError::Config(format!(
                "model.data_dim {} does not match the mixture dimension {}",
                self.model.data_dim, mix.dim
            )));
        }
        self.schedule.build()?;
        self.train.validate()?;
        self.erase.validate(mix.n_concepts())?;
        if self.monitor.n_samples < 3 {
            return Err(CliError::Config("monitor.n_samples must be >= 3".into()));
        }
        if self.sample.n == 0 {
            return Err(CliError::Config("sample.n must be >= 1".into()));
        }
        self.sample.guidance.validate()?;
        self.eval.validate()?;
        for m in &self.compare.methods {
            if !COMPARE_METHODS.contains(&m.as_str()) {
                return Err(CliError::Config(format!("unknown compare method {m:?}")));
            }
        }
        Ok(mix)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// `a.b.c=value`; the value is parsed as TOML, falling back to a bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
