//! Run configuration files.
//!
//! A config is a TOML document with `schema_version = 1` and three
//! sections:
//!
//! ```toml
//! schema_version = 1
//!
//! [model]          # family is required; every other key defaults per family
//! family = "dspp"
//! layers = 2
//! hidden_width = 3
//! inducing = 64
//! smoothness = "5/2"
//! covariance = "full"
//! quadrature = "qr3"
//! sites = 10
//!
//! [train]          # any `TrainConfig` field
//! epochs = 100
//! batch_size = 256
//!
//! [data]
//! name = "sin"
//! synthetic = "sin"   # or path = "data.csv" with targets = ["y"]
//! n = 2000
//! split_seed = 0
//! split = 0
//! ```
//!
//! Any key can be overridden with a `section.key=value` string whose value
//! is parsed as a TOML value, falling back to a bare string.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::Synthetic;
use crate::error::{Error, Result};
use crate::gp_layer::CovKind;
use crate::kernels::Smoothness;
use crate::models::{Family, ModelConfig};
use crate::quadrature::RuleKind;
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Model keys of a config file; absent keys take the family defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inducing: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<Smoothness>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<CovKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrature: Option<RuleKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_samples_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_samples_eval: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lmc: Option<bool>,
}

impl ModelSection {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            layers: None,
            hidden_width: None,
            inducing: None,
            smoothness: None,
            covariance: None,
            quadrature: None,
            sites: None,
            mc_samples_train: None,
            mc_samples_eval: None,
            topology: None,
            lmc: None,
        }
    }

    /// Full model configuration for data with `d` inputs and `dy` outputs.
    pub fn resolve(&self, d: usize, dy: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::new(self.family, d, dy);
        c.layers = self.layers.unwrap_or(c.layers);
        c.hidden_width = self.hidden_width.unwrap_or(c.hidden_width);
        c.inducing = self.inducing.unwrap_or(c.inducing);
        c.smoothness = self.smoothness.unwrap_or(c.smoothness);
        c.covariance = self.covariance.unwrap_or(c.covariance);
        c.quadrature = self.quadrature.unwrap_or(c.quadrature);
        c.sites = self.sites.unwrap_or(c.sites);
        c.mc_samples_train = self.mc_samples_train.unwrap_or(c.mc_samples_train);
        c.mc_samples_eval = self.mc_samples_eval.unwrap_or(c.mc_samples_eval);
        c.topology = self.topology.unwrap_or(c.topology);
        c.lmc = self.lmc.unwrap_or(c.lmc);
        c.validate()?;
        Ok(c)
    }
}

/// Where the data comes from and how it is split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset label used to key result rows.
    pub name: Option<String>,
    pub path: Option<PathBuf>,
    pub targets: Vec<String>,
    pub synthetic: Option<Synthetic>,
    /// Rows generated for a synthetic dataset.
    pub n: Option<usize>,
    /// Seed of synthetic generation and of the split shuffle.
    pub split_seed: u64,
    pub split: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

impl RunConfig {
    pub fn new(family: Family) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelSection::new(family),
            train: TrainConfig::default(),
            data: DataSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            Error::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override `{assignment}` is not key=value")))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(Error::InvalidConfig(format!("bad override key `{path}`")));
        }
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));

        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut table = &mut root;
        for k in &keys[..keys.len() - 1] {
            table = table
                .entry(k.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::InvalidConfig(format!("`{k}` is not a section")))?;
        }
        table.insert(keys[keys.len() - 1].to_string(), value);
        let updated: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("override `{assignment}`: {}", e.message())))?;
        *self = updated;
        Ok(())
    }
}
