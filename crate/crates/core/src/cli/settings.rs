//! Layered configuration: built-in defaults, then a TOML file, then
//! `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ArchConfig, ModelConfig};
use crate::data::{Protocol, TrialFile};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Expected trial layout. Checked against the data file when set.
    pub channels: Option<usize>,
    pub samples: Option<usize>,
    pub classes: Option<usize>,
    /// `loso` or `kfold`.
    pub protocol: String,
    pub folds: usize,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            channels: None,
            samples: None,
            classes: None,
            protocol: "kfold".into(),
            folds: 10,
            split_seed: 0,
        }
    }
}

impl DataSection {
    pub fn protocol(&self) -> Result<Protocol> {
        match self.protocol.as_str() {
            "loso" => Ok(Protocol::Loso),
            "kfold" => Ok(Protocol::Kfold { k: self.folds }),
            other => Err(Error::Config(format!("unknown protocol `{other}` (expected loso or kfold)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub ablation: Ablation,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form section.key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.len() != 2 || keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key `{path}` must be section.key")));
    }
    let section = table
        .entry(keys[0])
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(section) = section else {
        return Err(Error::Config(format!("`{}` is not a section", keys[0])));
    };
    section.insert(keys[1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl CliConfig {
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(CliConfig::default())
            .map_err(|e| Error::Config(format!("default configuration: {e}")))?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)?;
            let file: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), one_line(&e))))?;
            merge(&mut table, file);
        }
        for s in sets {
            apply_set(&mut table, s)?;
        }
        let cfg: CliConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(one_line(&e)))?;
        cfg.train.validate()?;
        cfg.data.protocol()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Model configuration for an explicit trial layout.
    pub fn model(&self, channels: usize, samples: usize, classes: usize) -> Result<ModelConfig> {
        let m = ModelConfig {
            channels,
            samples,
            classes,
            arch: self.arch.clone(),
            ablation: self.ablation.clone(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Model configuration taken from a data file, rejecting any mismatch
    /// with layout values fixed in the `[data]` section.
    pub fn model_for(&self, data: &TrialFile) -> Result<ModelConfig> {
        for (what, want, got) in [
            ("channels", self.data.channels, data.channels),
            ("samples", self.data.samples, data.samples),
            ("classes", self.data.classes, data.classes),
        ] {
            if let Some(w) = want {
                if w != got {
                    return Err(Error::Config(format!(
                        "configuration expects {w} {what} but the data file has {got}"
                    )));
                }
            }
        }
        self.model(data.channels, data.samples, data.classes)
    }
}

fn one_line(e: &dyn std::fmt::Display) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}
