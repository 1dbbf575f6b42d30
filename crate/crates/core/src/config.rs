//! Experiment configuration as flat JSON with dotted keys.
//!
//! `{"train.lr": 0.01, "net.base_width": 8, ...}`. Every field has a
//! default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::experiment::{AugmentConfig, Variant};
use crate::meta::{FineTuneConfig, TrainConfig};
use crate::phantoms::AgeGroupSpec;
use crate::segnet::NetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    /// Pool directory written by `gendata` and read by everything else.
    pub path: String,
    pub seed: u64,
    pub groups: Vec<AgeGroupSpec>,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            path: "pool".into(),
            seed: 0,
            groups: AgeGroupSpec::defaults(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Pixel spacing used to scale surface distances.
    pub spacing: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { spacing: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seed for initialization, episode sampling and shot selection.
    pub seed: u64,
    /// Seed list for multi-seed commands.
    pub seeds: Vec<u64>,
    pub out_dir: String,
    /// Ablation row trained by `metatrain`.
    pub variant: Variant,
    pub pool: PoolConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub finetune: FineTuneConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        Self {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: "runs".into(),
            variant: Variant::E,
            pool: PoolConfig::default(),
            train: TrainConfig {
                loss: crate::losses::LossWeights::for_scales(net.scales),
                ..TrainConfig::default()
            },
            net,
            finetune: FineTuneConfig::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Nested object → dotted keys. Arrays are leaves.
pub fn flatten(v: &Value) -> Map<String, Value> {
    let mut out = Map::new();
    flatten_into("", v, &mut out);
    out
}

/// Dotted keys → nested object.
pub fn unflatten(flat: &Map<String, Value>) -> Result<Value> {
    let mut root = Map::new();
    for (key, value) in flat {
        if value.is_object() {
            return Err(Error::Config(format!("key {key:?}: nested objects are not allowed, use dotted keys")));
        }
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed key {key:?}")));
        }
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            let slot = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = slot
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("key {key:?} conflicts with a scalar key")))?;
        }
        let last = parts[parts.len() - 1];
        if node.contains_key(last) {
            return Err(Error::Config(format!("key {key:?} conflicts with another key")));
        }
        node.insert(last.to_string(), value.clone());
    }
    Ok(Value::Object(root))
}

impl ExperimentConfig {
    pub fn to_flat(&self) -> Map<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Pretty flat JSON with sorted keys, as printed by `--print-defaults`.
    pub fn to_flat_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&Value::Object(self.to_flat())).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        let nested = unflatten(flat)?;
        let cfg: Self = serde_json::from_value(nested).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_flat_str(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        match v {
            Value::Object(m) => Self::from_flat(&m),
            _ => Err(Error::Config("config must be a JSON object".into())),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing(format!("config {}", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_flat_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` where value is JSON, or a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let mut flat = self.to_flat();
        if !flat.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        flat.insert(key.to_string(), value);
        *self = Self::from_flat(&flat)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        if self.train.loss.deep_supervision.len() != self.net.scales {
            return Err(Error::Config(format!(
                "train.loss.deep_supervision has {} weights for {} scales",
                self.train.loss.deep_supervision.len(),
                self.net.scales
            )));
        }
        if self.pool.groups.len() != 4 {
            return Err(Error::Config(format!(
                "pool.groups must list 3 training groups plus 1 test group, got {}",
                self.pool.groups.len()
            )));
        }
        for g in &self.pool.groups {
            g.validate()?;
        }
        if self.finetune.n_upsample_layers + 1 > self.net.scales {
            return Err(Error::Config(format!(
                "finetune.n_upsample_layers must be at most {} for {} scales",
                self.net.scales - 1,
                self.net.scales
            )));
        }
        if self.finetune.shots == 0 {
            return Err(Error::Config("finetune.shots must be at least 1".into()));
        }
        if !(self.eval.spacing > 0.0) {
            return Err(Error::Config("eval.spacing must be positive".into()));
        }
        if self.augment.noise_sigma < 0.0 {
            return Err(Error::Config("augment.noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_flat_json() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_flat_json();
        let v: Value = serde_json::from_str(&text).unwrap();
        assert!(v.as_object().unwrap().values().all(|v| !v.is_object()));
        assert!(v.get("train.lr").is_some() && v.get("train.loss.beta").is_some());
        assert_eq!(ExperimentConfig::from_flat_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg = ExperimentConfig::from_flat_str(r#"{"train.lr": 0.5, "net.base_width": 4}"#).unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.net.base_width, 4);
        assert_eq!(cfg.train.momentum, TrainConfig::default().momentum);
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        for bad in [
            r#"{"train.lrr": 0.5}"#,
            r#"{"bogus": 1}"#,
            r#"{"train": {"lr": 0.5}}"#,
            r#"{"train.lr": 0.5, "train.lr.x": 1}"#,
            r#"{"train..lr": 0.5}"#,
            "[1]",
        ] {
            assert!(matches!(ExperimentConfig::from_flat_str(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn overrides_and_validation() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("train.hypergrad_mode=first-order").unwrap();
        cfg.set("finetune.steps=0").unwrap();
        assert_eq!(cfg.train.hypergrad_mode, crate::meta::HypergradMode::FirstOrder);
        assert!(cfg.set("nope=1").is_err());
        cfg.pool.groups.truncate(2);
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("3 training groups plus 1 test group"), "{err}");
    }
}
