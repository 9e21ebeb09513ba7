//! Experiment configuration files, configuration hashes and run manifests.
//!
//! A configuration file is flat TOML: every training key plus `data`,
//! `grammar`, `out_dir` and `eval_horizons`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub grammar: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Empty means the training horizon.
    pub eval_horizons: Vec<f64>,
}

const EXTRA_KEYS: [&str; 4] = ["data", "grammar", "out_dir", "eval_horizons"];

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    /// Missing keys take the defaults of the configured task; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(config_error)?;
        let path = |v: Option<toml::Value>| -> Result<Option<PathBuf>> {
            match v {
                None => Ok(None),
                Some(toml::Value::String(s)) => Ok(Some(PathBuf::from(s))),
                Some(other) => Err(Error::Config(format!("expected a path string, got {other}"))),
            }
        };
        let data = path(table.remove("data"))?;
        let grammar = path(table.remove("grammar"))?;
        let out_dir = path(table.remove("out_dir"))?;
        let eval_horizons = match table.remove("eval_horizons") {
            None => Vec::new(),
            Some(v) => v.try_into().map_err(config_error)?,
        };
        let recognition = table.get("task").and_then(|v| v.as_str()) == Some("recognition");
        let base = if recognition { TrainConfig::recognition() } else { TrainConfig::default() };
        let mut merged = match toml::Value::try_from(&base).map_err(config_error)? {
            toml::Value::Table(t) => t,
            _ => unreachable!("training config serializes to a table"),
        };
        merged.extend(table);
        let train: TrainConfig = toml::Value::Table(merged).try_into().map_err(config_error)?;
        train.validate()?;
        let cfg = Self { train, data, grammar, out_dir, eval_horizons };
        cfg.check_horizons()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut table = match toml::Value::try_from(&self.train).map_err(config_error)? {
            toml::Value::Table(t) => t,
            _ => unreachable!("training config serializes to a table"),
        };
        let text = |p: &Path| toml::Value::String(p.to_string_lossy().into_owned());
        for (key, value) in EXTRA_KEYS.iter().zip([&self.data, &self.grammar, &self.out_dir]) {
            if let Some(p) = value {
                table.insert(key.to_string(), text(p));
            }
        }
        if !self.eval_horizons.is_empty() {
            table.insert("eval_horizons".into(), toml::Value::try_from(&self.eval_horizons).map_err(config_error)?);
        }
        toml::to_string(&table).map_err(config_error)
    }

    fn check_horizons(&self) -> Result<()> {
        if let Some(h) = self.eval_horizons.iter().find(|&&h| !(h > 0.0 && h <= self.train.horizon)) {
            return Err(Error::Config(format!("evaluation horizon {h} outside (0, {}]", self.train.horizon)));
        }
        Ok(())
    }

    /// Referenced input paths must exist.
    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.data, &self.grammar].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Dataset { path: p.clone(), message: "does not exist".into() });
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

/// Short form of a hash used in artifact names.
pub fn short_hash(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub dataset_hash: Option<String>,
    pub inputs: Vec<String>,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: None,
            seed: None,
            dataset_hash: None,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("run_manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
