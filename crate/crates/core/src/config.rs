//! Run configuration: every stage's settings plus the master seed.
//!
//! The file format is TOML with dotted section names, e.g.
//!
//! ```toml
//! seed = 3
//! [model]
//! embedding_dim = 64
//! [siamese.mining]
//! mode = "knn_graph"
//! ```
//!
//! Overrides use the same dotted keys (`siamese.margin=2`) and win over the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SynthConfig;
use crate::disentangle::DisentangleConfig;
use crate::error::{Error, Result};
use crate::evalcluster::DEFAULT_PAIR_CAP;
use crate::evalstd::RetrievalConfig;
use crate::neural::ModelDims;
use crate::seed::derive_seed;
use crate::siamese::{SiameseConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fraction of segments held out for evaluation.
    pub test_fraction: f64,
    /// Number of most frequent labels kept for clustering; 0 keeps all.
    pub cluster_labels: usize,
    /// Cluster counts; empty means `m` and `2m`.
    pub cluster_counts: Vec<usize>,
    pub cosine_pair_cap: usize,
    pub probe_test_fraction: f64,
    pub probe_ridge: f64,
    /// Variants trained and evaluated by the end-to-end experiment.
    pub variants: Vec<Variant>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.3,
            cluster_labels: 0,
            cluster_counts: Vec::new(),
            cosine_pair_cap: DEFAULT_PAIR_CAP,
            probe_test_fraction: 0.3,
            probe_ridge: 1.0,
            variants: Variant::ALL.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("test_fraction", self.test_fraction),
            ("probe_test_fraction", self.probe_test_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("eval.{name} must lie in (0, 1)")));
            }
        }
        if !(self.probe_ridge > 0.0) {
            return Err(Error::Config("eval.probe_ridge must be positive".into()));
        }
        if self.cosine_pair_cap == 0 || self.cluster_counts.contains(&0) {
            return Err(Error::Config(
                "eval.cosine_pair_cap and cluster counts must be positive".into(),
            ));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("eval.variants must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every randomized stage derives its own seed from it.
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelDims,
    pub disentangle: DisentangleConfig,
    pub siamese: SiameseConfig,
    pub eval: EvalConfig,
    pub retrieval: RetrievalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.disentangle.validate()?;
        self.siamese.validate()?;
        self.eval.validate()?;
        self.retrieval.validate()?;
        if self.model.feature_dim != self.synth.feature_dim {
            return Err(Error::Config(format!(
                "model.feature_dim {} differs from synth.feature_dim {}",
                self.model.feature_dim, self.synth.feature_dim
            )));
        }
        Ok(())
    }

    /// Seed of a named stage.
    pub fn stage_seed(&self, tag: &str) -> u64 {
        derive_seed(self.seed, tag)
    }

    /// Disentangling settings with the derived seed filled in.
    pub fn disentangle_cfg(&self) -> DisentangleConfig {
        DisentangleConfig {
            seed: self.stage_seed("train"),
            ..self.disentangle.clone()
        }
    }

    /// Siamese settings with the derived seed filled in.
    pub fn siamese_cfg(&self) -> SiameseConfig {
        SiameseConfig {
            seed: self.stage_seed("siamese"),
            ..self.siamese.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parse a `key=value` override into a TOML value. Values that are not valid
/// TOML (bare words) are taken as strings.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Parse configuration text, apply overrides, fill defaults and validate.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = text.parse().map_err(config_error)?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(config_error)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read a configuration file (or defaults when `path` is `None`) and apply overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}
