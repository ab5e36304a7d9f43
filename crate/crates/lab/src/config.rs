//! Experiment configuration: one flat JSON object with dotted keys.
//!
//! Keys under `data.` describe where real samples come from; every other key
//! belongs to the run (see [`RunConfig`]). Command-line flags are applied on
//! top of the file as `key = value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use setgan::training::RunConfig;

use crate::error::{LabError, LabResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training samples from a CSV file instead of the synthetic grid.
    #[serde(rename = "data.path", skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Held-out real samples; synthesized (or split off `data.path`) if absent.
    #[serde(rename = "data.heldout_path", skip_serializing_if = "Option::is_none")]
    pub heldout_path: Option<PathBuf>,
    #[serde(rename = "data.samples")]
    pub samples: usize,
    #[serde(rename = "data.heldout")]
    pub heldout: usize,
    #[serde(rename = "data.seed")]
    pub seed: u64,
    #[serde(rename = "data.side")]
    pub side: usize,
    #[serde(rename = "data.spacing")]
    pub spacing: f64,
    #[serde(rename = "data.sigma")]
    pub sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            heldout_path: None,
            samples: 25_000,
            heldout: 4_000,
            seed: 2024,
            side: 5,
            spacing: 2.0,
            sigma: 0.05,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub data: DataConfig,
}

fn split(map: Map<String, Value>) -> (Map<String, Value>, Map<String, Value>) {
    map.into_iter().partition(|(k, _)| !k.starts_with("data."))
}

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("structs serialize to objects"),
    }
}

impl ExperimentConfig {
    /// Parses a flat map; unknown keys and malformed values are field errors.
    pub fn from_map(map: Map<String, Value>) -> LabResult<Self> {
        let (run, data) = split(map);
        let run: RunConfig = serde_json::from_value(Value::Object(run))
            .map_err(|e| LabError::usage(format!("invalid configuration: {e}")))?;
        let data: DataConfig = serde_json::from_value(Value::Object(data))
            .map_err(|e| LabError::usage(format!("invalid configuration: {e}")))?;
        Ok(ExperimentConfig { run, data })
    }

    pub fn to_map(&self) -> Map<String, Value> {
        let mut m = object(serde_json::to_value(&self.run).expect("serializable"));
        m.extend(object(serde_json::to_value(&self.data).expect("serializable")));
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&Value::Object(self.to_map())).expect("serializable")
    }

    /// Validates both halves and returns the resolved configuration.
    pub fn validate(self) -> LabResult<Self> {
        let run = self.run.validate()?;
        let d = &self.data;
        if !(d.sigma.is_finite() && d.sigma > 0.0) {
            return Err(setgan::Error::Config {
                field: "data.sigma".into(),
                detail: format!("must be positive, got {}", d.sigma),
            }
            .into());
        }
        if d.side == 0 || !(d.spacing.is_finite() && d.spacing > 0.0) {
            return Err(LabError::usage("invalid configuration: data.side and data.spacing must be positive"));
        }
        if d.path.is_none() && d.samples < run.k {
            return Err(LabError::usage("invalid configuration: data.samples is smaller than k"));
        }
        if d.heldout < 1 << run.sbd_depth {
            return Err(LabError::usage(
                "invalid configuration: data.heldout must be at least 2^early_stop.depth",
            ));
        }
        Ok(ExperimentConfig { run, data: self.data })
    }
}

pub fn load_map(path: &Path) -> LabResult<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| LabError::file(path, e))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(LabError::Parse {
            path: path.display().to_string(),
            detail: "configuration must be a JSON object".into(),
        }),
        Err(e) => Err(LabError::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        }),
    }
}

/// Parses `value` as JSON, falling back to a plain string.
pub fn override_value(value: &str) -> Value {
    serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()))
}

/// Parses `key=value` pairs into `map`.
pub fn apply_overrides(map: &mut Map<String, Value>, pairs: &[String]) -> LabResult<()> {
    for p in pairs {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| LabError::usage(format!("override `{p}` is not key=value")))?;
        map.insert(k.trim().to_string(), override_value(v.trim()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_flat_map() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_map(cfg.to_map()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.to_map().contains_key("data.sigma"));
        assert!(cfg.to_map().contains_key("early_stop.patience"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut m = ExperimentConfig::default().to_map();
        m.insert("data.sigmaa".into(), Value::from(1.0));
        assert!(ExperimentConfig::from_map(m).is_err());
        let mut m = Map::new();
        m.insert("lr".into(), Value::from("fast"));
        let err = ExperimentConfig::from_map(m).unwrap_err().to_string();
        assert!(err.contains("invalid"), "{err}");
    }

    #[test]
    fn overrides_parse_json_or_strings() {
        let mut m = Map::new();
        apply_overrides(&mut m, &["k=3".into(), "arch=pacgan".into(), "lr = 0.5".into()]).unwrap();
        assert_eq!(m["k"], Value::from(3));
        assert_eq!(m["arch"], Value::from("pacgan"));
        assert_eq!(m["lr"], Value::from(0.5));
        assert!(apply_overrides(&mut m, &["nonsense".into()]).is_err());
    }
}
