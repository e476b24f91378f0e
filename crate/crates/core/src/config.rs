//! Experiment configuration: a TOML document with a `[train]` table (the
//! full [`TrainConfig`]), an `[eval]` table and a `[complexity]` table.
//! Every field has a default, so an empty file is a valid configuration.
//! Overrides use dotted keys, e.g. `train.capo.gamma=1` or
//! `train.env.task_mix.numeric=0`.

use crate::budget::ComplexityConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out episodes scored after training.
    pub held_out_episodes: usize,
    /// Fraction of the history whose mean is reported as the final value.
    pub tail_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { held_out_episodes: 200, tail_fraction: 0.1 }
    }
}

/// Inputs of the complexity calculator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComplexityCalcConfig {
    pub model: ComplexityConfig,
    pub retentions: Vec<f64>,
    pub token_budget: u64,
    pub frame_height: u32,
    pub frame_width: u32,
}

impl Default for ComplexityCalcConfig {
    fn default() -> Self {
        Self {
            model: ComplexityConfig::default(),
            retentions: vec![1.0, 0.5, 0.25, 0.11, 0.0625],
            token_budget: 16384,
            frame_height: 448,
            frame_width: 448,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub complexity: ComplexityCalcConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.held_out_episodes == 0 {
            return Err(Error::config("eval.held_out_episodes must be at least 1"));
        }
        if !(self.eval.tail_fraction > 0.0 && self.eval.tail_fraction <= 0.5) {
            return Err(Error::config("eval.tail_fraction must lie in (0, 0.5]"));
        }
        if self.complexity.retentions.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::config("complexity.retentions must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Parses a TOML document, applies `overrides` and validates the result.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    /// The full configuration, defaults included, as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Config(format!("cannot serialise config: {e}")))?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }
}

/// Sets `key=value` in `doc`, creating intermediate tables. The value is
/// read as a TOML literal and falls back to a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').map(str::trim).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` has an empty segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::AdvantageScheme;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::from_toml_str(
            "[train]\niterations = 7\n",
            &[
                "train.capo.gamma=1".into(),
                "train.advantage=lagrangian".into(),
                "train.env.task_mix.numeric = 0.5".into(),
                "train.allocator.temporal_cue=true".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.train.capo.gamma, 1.0);
        assert_eq!(cfg.train.advantage, AdvantageScheme::Lagrangian);
        assert!(cfg.train.allocator.temporal_cue);
        let numeric = cfg.train.env.task_mix[&crate::rewards::TaskKind::Numeric];
        assert_eq!(numeric, 0.5);
    }

    #[test]
    fn integer_literal_for_float_field() {
        let cfg = ExperimentConfig::from_toml_str("", &["train.reg.lambda_sim=0".into()]).unwrap();
        assert_eq!(cfg.train.reg.lambda_sim, 0.0);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("", &["train.nope=1".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["train.clip_eps=2".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["missing_equals".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("[train\n", &[]).is_err());
    }

    #[test]
    fn echo_round_trips_and_hash_is_stable() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.seed = 42;
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml_str(&text, &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        assert_eq!(cfg.hash().unwrap().len(), 64);
        assert_ne!(cfg.hash().unwrap(), ExperimentConfig::default().hash().unwrap());
    }
}
