//! Declarative run configuration: TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::synthetic::SyntheticSpec;
use crate::data::RegionBox;
use crate::error::{ensure, Error, Result};
use crate::model::{FusionMode, ModelConfig};
use crate::preprocess::InputConfig;
use crate::retrieval::Metric;
use crate::training::TrainConfig;

/// Overrides `dataset.root` when set.
pub const DATA_ROOT_ENV: &str = "ADAFUSION_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub root: PathBuf,
    /// Sequences to use; empty means every directory under `root`.
    pub sequences: Vec<String>,
    /// Largest image/cloud timestamp gap accepted by association, seconds.
    pub max_dt: f64,
    /// Keep one frame per this much travelled distance; 0 keeps all.
    pub frame_spacing: f64,
    pub test_boxes: Vec<RegionBox>,
    /// Fraction of training regions held out for validation.
    pub holdout_fraction: f64,
    /// Side of the square regions used for the hold-out, meters.
    pub holdout_cell: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            sequences: Vec::new(),
            max_dt: 0.05,
            frame_spacing: 10.0,
            test_boxes: Vec::new(),
            holdout_fraction: 0.1,
            holdout_cell: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Uniform width for every layer; `None` keeps the full-size widths.
    pub width: Option<usize>,
    /// Descriptor length; each modality gets half. `None` keeps `2·C1`.
    pub descriptor_dim: Option<usize>,
    pub attention_channels: Option<usize>,
    pub fusion_channels: Option<usize>,
    pub fc_hidden: Vec<usize>,
    pub fusion: FusionMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            width: None,
            descriptor_dim: None,
            attention_channels: None,
            fusion_channels: None,
            fc_hidden: vec![64, 32],
            fusion: FusionMode::Adaptive,
        }
    }
}

impl ModelSection {
    pub fn build(&self) -> Result<ModelConfig> {
        let mut m = match self.width {
            Some(w) => {
                ensure!(w > 0, Validation, "model.width must be positive");
                ModelConfig::uniform_width(w)
            }
            None => ModelConfig::default(),
        };
        if let Some(d) = self.descriptor_dim {
            m = m.with_descriptor_dim(d)?;
        }
        if let Some(c) = self.attention_channels {
            m.attention_channels = c;
        }
        if let Some(c) = self.fusion_channels {
            m.fusion_channels = c;
        }
        m.fc_hidden = self.fc_hidden.clone();
        m.fusion = self.fusion;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ns: Vec<usize>,
    pub metric: Metric,
    pub d_tp: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ns: vec![1, 5, 10, 25],
            metric: Metric::L1,
            d_tp: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Directory receiving index, checkpoint, database and report files.
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("run") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub input: InputConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub synth: SyntheticSpec,
    pub output: OutputSection,
}

impl RunConfig {
    /// Parse TOML text, apply `key=value` overrides (dotted keys, values in
    /// TOML syntax with a bare-string fallback) and validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Validation(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Validation(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Read a config file; a missing path yields the defaults. The data-root
    /// environment variable wins over the file and the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let mut config = Self::from_toml_str(&text, overrides)?;
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            if !root.is_empty() {
                config.dataset.root = PathBuf::from(root);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.input.validate()?;
        self.train.validate()?;
        self.model.build()?;
        ensure!(
            self.dataset.max_dt > 0.0 && self.dataset.frame_spacing >= 0.0,
            Validation,
            "dataset.max_dt must be positive and frame_spacing non-negative"
        );
        ensure!(
            self.eval.d_tp > 0.0 && self.eval.ns.iter().all(|&n| n > 0),
            Validation,
            "eval.d_tp and eval.ns must be positive"
        );
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// SHA-256 over the fully resolved configuration, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// First 16 hex digits of [`RunConfig::hash`].
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Validation(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = parse_value(raw);
    let parts: Vec<&str> = key.split('.').collect();
    ensure!(
        parts.iter().all(|p| !p.is_empty()),
        Validation,
        "override key `{key}` is malformed"
    );
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Validation(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
