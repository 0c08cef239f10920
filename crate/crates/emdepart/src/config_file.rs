//! JSON run configuration: `{preset, data, model, alignment, train, eval}`.
//!
//! Every key is optional. Missing keys take the value of the named preset
//! (`desk` by default); unknown keys are rejected.

use std::path::Path;

use emdepart_core::config::{AlignmentConfig, EvalConfig, ExperimentConfig, ModelConfig, TrainConfig};
use emdepart_core::data::OovPolicy;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub oov_policy: OovPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub data: DataSection,
    pub model: ModelConfig,
    pub alignment: AlignmentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    Ok(match name {
        "awa2" => ExperimentConfig::awa2(),
        "cub" => ExperimentConfig::cub(),
        "flo" => ExperimentConfig::flo(),
        "desk" => ExperimentConfig::desk(),
        other => return Err(CliError::Usage(format!("unknown preset {other:?} (awa2, cub, flo, desk)"))),
    })
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ConfigFile {
    pub fn new(data: DataSection, cfg: ExperimentConfig) -> Self {
        ConfigFile {
            data,
            model: cfg.model,
            alignment: cfg.alignment,
            train: cfg.train,
            eval: cfg.eval,
        }
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        Ok(Self::new(DataSection::default(), preset(name)?))
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.clone(),
            alignment: self.alignment.clone(),
            train: self.train.clone(),
            eval: self.eval.clone(),
        }
    }

    /// Overlays `text` on its preset and validates the result.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad = |msg: String| CliError::Config {
            path: origin.to_path_buf(),
            msg,
        };
        let mut over: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let name = match over.as_object_mut().map(|o| o.remove("preset")) {
            None => return Err(bad("configuration must be a JSON object".into())),
            Some(None) => "desk".to_string(),
            Some(Some(Value::String(s))) => s,
            Some(Some(v)) => return Err(bad(format!("preset must be a string, got {v}"))),
        };
        let mut merged = serde_json::to_value(Self::from_preset(&name)?).expect("config serializes");
        merge(&mut merged, over);
        let cfg: ConfigFile = serde_json::from_value(merged).map_err(|e| bad(e.to_string()))?;
        cfg.experiment().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ConfigFile> {
        ConfigFile::parse(s, Path::new("cfg.json"))
    }

    #[test]
    fn empty_object_is_the_desk_preset() {
        assert_eq!(parse("{}").unwrap().experiment(), ExperimentConfig::desk());
    }

    #[test]
    fn keys_override_the_preset() {
        let c = parse(r#"{"preset": "cub", "train": {"epochs": 2}, "model": {"r": 16}, "data": {"oov_policy": "zero"}}"#)
            .unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.model.r, 16);
        assert_eq!(c.alignment.tau, 4.2);
        assert_eq!(c.data.oov_policy, OovPolicy::Zero);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert_eq!(parse(r#"{"train": {"epoch": 2}}"#).unwrap_err().exit_code(), 1);
        assert!(parse(r#"{"extra": 1}"#).is_err());
        assert!(parse(r#"{"preset": "imagenet"}"#).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let e = parse(r#"{"alignment": {"p": 9}}"#).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }
}
