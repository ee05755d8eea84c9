//! Run configuration: flat JSON with dotted keys, overridable from the command line.
//!
//! ```json
//! { "seed": 7, "model.d": 16, "train.epochs": 50, "synth.n_subjects": 8 }
//! ```
//!
//! Omitted keys take their defaults. A single top-level `seed` drives every
//! random stream, so the nested `train.seed` and `synth.seed` are not keys.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::dataio::{Protocol, SynthConfig};
use crate::model::ModelHyperParams;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

const DERIVED_KEYS: &[&str] = &["train.seed", "synth.seed"];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// dataset directory; synthetic data from `synth.*` when absent
    pub data: Option<String>,
    pub out: Option<String>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub protocol: Protocol,
    pub fold: usize,
    /// fold-level threads for `protocol`; 0 uses every core
    pub jobs: usize,
    pub majority_vote: bool,
    pub paths: Paths,
    pub model: ModelHyperParams,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            protocol: Protocol::CrossSubject,
            fold: 0,
            jobs: 1,
            majority_vote: false,
            paths: Paths::default(),
            model: ModelHyperParams::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Nested objects to dotted keys; arrays and scalars are leaves.
pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    fn go(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, x) in m {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    go(&key, x, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    go("", v, &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted prefixes are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

impl RunConfig {
    fn defaults_flat() -> BTreeMap<String, Value> {
        Self::default().to_flat()
    }

    /// Dotted-key view without the derived seeds.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut flat = flatten(&serde_json::to_value(self).expect("serializable config"));
        for k in DERIVED_KEYS {
            flat.remove(*k);
        }
        flat
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("serializable config") + "\n"
    }

    /// Overlay `overrides` on `self`, then propagate the seed and validate.
    pub fn merged(&self, overrides: &BTreeMap<String, Value>) -> Result<Self> {
        let known = Self::defaults_flat();
        let mut flat = self.to_flat();
        for (k, v) in overrides {
            if !known.contains_key(k) {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
            flat.insert(k.clone(), v.clone());
        }
        let mut cfg: Self = serde_json::from_value(unflatten(&flat)).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let obj = v
            .as_object()
            .ok_or_else(|| ConfigError::Parse("config must be a JSON object".into()))?;
        let overrides: BTreeMap<String, Value> = obj.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        Self::default().merged(&overrides)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.synth.validate().map_err(|e| invalid(&e))?;
        if self.paths.data.is_none() {
            let (m, s) = (&self.model, &self.synth);
            if m.n_channels != s.n_channels || m.n_samples != s.n_samples || m.n_classes != s.n_classes {
                return Err(ConfigError::Invalid(format!(
                    "model expects {}x{} with {} classes but synth generates {}x{} with {}",
                    m.n_channels, m.n_samples, m.n_classes, s.n_channels, s.n_samples, s.n_classes
                )));
            }
            if m.sample_rate_hz != s.sample_rate_hz {
                return Err(ConfigError::Invalid(
                    "model.sample_rate_hz differs from synth.sample_rate_hz".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Parse `key=value`; the value is JSON when it parses as JSON, else a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::Parse(format!("expected key=value, got `{s}`")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_round_trip_through_flat_json() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let flat = cfg.to_flat();
        assert!(flat.contains_key("model.mfm.width"));
        assert!(flat.contains_key("train.ablation.no_plv"));
        assert!(!flat.contains_key("train.seed"));
        assert_eq!(flat["protocol"], json!("cross-subject"));
    }

    #[test]
    fn dotted_keys_override_and_seed_propagates() {
        let cfg = RunConfig::from_json_str(r#"{"seed": 9, "model.d": 12, "train.ablation.no_plv": true}"#).unwrap();
        assert_eq!(cfg.model.d, 12);
        assert!(cfg.train.ablation.no_plv);
        assert_eq!((cfg.train.seed, cfg.synth.seed), (9, 9));
        assert_eq!(cfg.model.n_channels, 23);
    }

    #[test]
    fn infinite_snr_survives() {
        let mut cfg = RunConfig::default();
        cfg.synth = cfg.synth.noise_free();
        let back = RunConfig::from_json_str(&cfg.to_json()).unwrap();
        assert_eq!(back.synth.snr_db, f64::INFINITY);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            RunConfig::from_json_str(r#"{"model.dd": 3}"#),
            Err(ConfigError::UnknownKey(k)) if k == "model.dd"
        ));
        assert!(matches!(
            RunConfig::from_json_str(r#"{"train.seed": 3}"#),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            RunConfig::from_json_str(r#"{"model.d": "wide"}"#),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            RunConfig::from_json_str(r#"{"train.epochs": 0}"#),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            RunConfig::from_json_str(r#"{"model.n_channels": 8}"#),
            Err(ConfigError::Invalid(_))
        ));
        assert!(RunConfig::from_json_str("[1]").is_err());
    }

    #[test]
    fn assignments() {
        assert_eq!(parse_assignment("model.d=16").unwrap(), ("model.d".into(), json!(16)));
        assert_eq!(
            parse_assignment("protocol=cross-session").unwrap(),
            ("protocol".into(), json!("cross-session"))
        );
        assert!(parse_assignment("nope").is_err());
    }

    #[test]
    fn unflatten_inverts_flatten() {
        let v = json!({"a": {"b": 1, "c": {"d": [1, 2]}}, "e": null});
        assert_eq!(unflatten(&flatten(&v)), v);
    }
}
