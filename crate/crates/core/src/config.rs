//! Run configuration: one TOML file with `[model]`, `[train]`, `[synth]` and
//! `[eval]` sections. Missing keys take their defaults; unknown keys are
//! rejected. `section.key=value` overrides are applied on top of the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::eval::CategoryThresholds;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub eval: CategoryThresholds,
}

/// Names accepted in place of a config file path.
pub const PRESETS: [&str; 2] = ["default", "desk"];

impl RunConfig {
    /// The reduced setup used for desk-scale runs on the synthetic
    /// 20-frame, 64×64 moving-square sequence.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::reduced(16, 5, 4),
            train: TrainConfig {
                max_epochs: 8,
                updates_per_epoch: 25,
                bcnn_batch_size: 16,
                patch_size: 40,
                background_frames: 20,
                val_patches: 32,
                early_stop_patience: 15,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(RunConfig::default()),
            "desk" => Some(RunConfig::desk()),
            _ => None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `source` (a file path or a preset name, or defaults when
    /// `None`) and applies `overrides` of the form `section.key=value`.
    pub fn load(source: Option<&str>, overrides: &[String]) -> Result<Self> {
        let base = match source {
            None => RunConfig::default(),
            Some(name) => match Self::preset(name) {
                Some(c) => c,
                None => {
                    let path = Path::new(name);
                    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    let table: toml::Table = text
                        .parse()
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                    let cfg: RunConfig = table
                        .try_into()
                        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))?;
                    cfg
                }
            },
        };
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.eval.validate()
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Sets `section.key` (any depth) to `value`, parsed as a TOML value and
/// falling back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{assignment}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
