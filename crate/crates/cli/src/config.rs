//! Flat JSON configs: one object holding any `ModelConfig` and
//! `TrainConfig` fields, plus `architecture` naming the base model preset.
//! Resolution order: preset, then file, then command-line flags.

use std::fs;
use std::path::Path;

use capsib_core::model::{Model, ModelConfig, PRESETS};
use capsib_core::training::TrainConfig;
use capsib_core::Precision;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

pub const DEFAULT_ARCHITECTURE: &str = "table1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 10k/2k MNIST subsets, 5 epochs, batch 64.
    Desk,
    /// Full splits, 100 epochs.
    Paper,
}

impl Preset {
    pub fn train(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(),
        }
    }
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub architecture: Option<String>,
    pub seed: Option<u64>,
    pub beta: Option<f64>,
    pub alpha: Option<f64>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub routing_iterations: Option<usize>,
    pub train_samples: Option<usize>,
    pub test_samples: Option<usize>,
    pub capsule_dim: Option<usize>,
    pub precision: Option<Precision>,
}

impl Overrides {
    fn apply_train(&self, t: &mut TrainConfig) {
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut t.beta, self.beta);
        set(&mut t.alpha, self.alpha);
        set(&mut t.learning_rate, self.learning_rate);
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.routing_iterations {
            t.routing_iterations = v;
        }
        if let Some(v) = self.train_samples {
            t.train_samples = Some(v);
        }
        if let Some(v) = self.test_samples {
            t.test_samples = Some(v);
        }
        if let Some(v) = self.precision {
            t.precision = v;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub architecture: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn as_object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("configs serialise to objects"),
    }
}

fn read_file(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(CliError::config(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(CliError::config(format!("{}: {e}", path.display()))),
    }
}

pub fn resolve(preset: Option<Preset>, file: Option<&Path>, ov: &Overrides) -> Result<Resolved> {
    let mut fields = match file {
        Some(p) => read_file(p)?,
        None => Map::new(),
    };
    let architecture = match (&ov.architecture, fields.remove("architecture")) {
        (Some(a), _) => a.clone(),
        (None, Some(Value::String(a))) => a,
        (None, Some(other)) => return Err(CliError::config(format!("architecture must be a string, got {other}"))),
        (None, None) => DEFAULT_ARCHITECTURE.to_string(),
    };
    let base_model = ModelConfig::preset(&architecture)
        .ok_or_else(|| CliError::config(format!("unknown architecture {architecture:?}; known: {}", PRESETS.join(", "))))?;
    let mut model = as_object(serde_json::to_value(base_model).expect("model config serialises"));
    let mut train = as_object(serde_json::to_value(preset.unwrap_or(Preset::Paper).train()).expect("train config serialises"));
    for (k, v) in fields {
        if model.contains_key(&k) {
            model.insert(k, v);
        } else if train.contains_key(&k) {
            train.insert(k, v);
        } else {
            return Err(CliError::config(format!("unknown config key {k:?}")));
        }
    }
    let mut model: ModelConfig =
        serde_json::from_value(Value::Object(model)).map_err(|e| CliError::config(format!("model config: {e}")))?;
    let mut train: TrainConfig =
        serde_json::from_value(Value::Object(train)).map_err(|e| CliError::config(format!("train config: {e}")))?;
    if let Some(d) = ov.capsule_dim {
        model.capsule_dim = d;
    }
    ov.apply_train(&mut train);
    train.validate()?;
    Model::build(model.clone())?;
    Ok(Resolved { architecture, model, train })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(json: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), json).unwrap();
        f
    }

    #[test]
    fn flags_beat_file_beat_preset() {
        let f = write(r#"{"architecture": "capsnet", "beta": 3.0, "epochs": 7, "capsule_dim": 16}"#);
        let ov = Overrides { beta: Some(0.5), ..Default::default() };
        let r = resolve(Some(Preset::Desk), Some(f.path()), &ov).unwrap();
        assert_eq!(r.architecture, "capsnet");
        assert_eq!((r.train.beta, r.train.epochs, r.train.train_samples), (0.5, 7, Some(10_000)));
        assert_eq!(r.model.capsule_dim, 16);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for json in [r#"{"betta": 1}"#, r#"{"beta": "x"}"#, r#"[1]"#, r#"{"architecture": "nope"}"#, "{"] {
            let f = write(json);
            let err = resolve(None, Some(f.path()), &Overrides::default()).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{json}: {err}");
        }
        let ov = Overrides { beta: Some(-1.0), ..Default::default() };
        assert_eq!(resolve(None, None, &ov).unwrap_err().exit_code(), 1);
        let ov = Overrides { capsule_dim: Some(0), ..Default::default() };
        assert_eq!(resolve(None, None, &ov).unwrap_err().exit_code(), 1);
    }
}
