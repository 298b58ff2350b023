//! Run configuration: defaults, then a TOML file, then command-line flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curation::PipelineConfig;
use crate::error::{Error, Result};
use crate::flow::TrainConfig;
use crate::model::ModelConfig;

pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training crops start at each kept chunk and last at most this long.
    pub clip_seconds: f64,
    /// `0` uses every kept chunk.
    pub max_clips: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { clip_seconds: 1.0, max_clips: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub steps: usize,
    pub guidance: f32,
    pub duration_s: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { steps: 32, guidance: 4.5, duration_s: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub provider: String,
    pub embedding_dim: usize,
    pub classes: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { provider: crate::metrics::STUB_PROVIDER_ID.into(), embedding_dim: 32, classes: 16 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Copied into every section that takes a seed.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub curate: PipelineConfig,
    pub generate: GenerateConfig,
    pub evaluate: EvaluateConfig,
}

/// A parsed config plus the dotted keys the file set explicitly.
#[derive(Debug, Clone, Default)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub file_keys: Vec<String>,
}

impl LoadedConfig {
    pub fn file_sets(&self, key: &str) -> bool {
        self.file_keys.iter().any(|k| k == key)
    }
}

fn collect_keys(prefix: &str, table: &toml::Table, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if let toml::Value::Table(t) = v {
            collect_keys(&key, t, out);
        } else {
            out.push(key);
        }
    }
}

pub fn parse_config(text: &str) -> Result<LoadedConfig> {
    let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut file_keys = Vec::new();
    collect_keys("", &table, &mut file_keys);
    for (k, v) in [("model.seed", config.model.seed), ("train.seed", config.train.seed)] {
        if file_keys.iter().any(|f| f == k) && v != config.seed {
            return Err(Error::Config(format!("{k} = {v} disagrees with the top-level seed {}", config.seed)));
        }
    }
    Ok(LoadedConfig { config, file_keys })
}

pub fn load_config(path: Option<&Path>) -> Result<LoadedConfig> {
    match path {
        None => Ok(LoadedConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            parse_config(&text)
        }
    }
}

impl RunConfig {
    /// Propagates the top-level seed and validates every section.
    pub fn finalize(mut self) -> Result<Self> {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.model.validate()?;
        self.curate.validate()?;
        if !(self.data.clip_seconds > 0.0) {
            return Err(Error::Config("data.clip_seconds must be positive".into()));
        }
        if self.generate.steps == 0 {
            return Err(Error::Config("generate.steps must be positive".into()));
        }
        if !(self.generate.duration_s > 0.0) {
            return Err(Error::Config("generate.duration_s must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.cfg_dropout) {
            return Err(Error::Config(format!("train.cfg_dropout {} outside [0, 1)", self.train.cfg_dropout)));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_ECHO), self.to_toml()?)?;
        Ok(())
    }

    pub fn read_echo(dir: &Path) -> Result<Self> {
        let p = dir.join(CONFIG_ECHO);
        let text = fs::read_to_string(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
    }
}
