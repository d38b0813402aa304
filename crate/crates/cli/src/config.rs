//! Experiment configuration: one JSON document, overridable from the command line.

use std::path::{Path, PathBuf};

use gin_core::analysis::Thresholds;
use gin_core::datagen::GroundTruthSpec;
use gin_core::flow::{FinalLayerInit, FlowConfig, FlowMode, ScaleConstraint, WeightInit};
use gin_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;
pub const OUTPUT_DIR_ENV: &str = "GIN_OUTPUT_DIR";

/// Architecture of the estimating flow. Its dimension comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub hidden: Vec<usize>,
    pub mode: FlowMode,
    pub constraint: ScaleConstraint,
    pub init: WeightInit,
    /// Zero the last layer of every subnet so training starts at the identity.
    pub identity_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let gin = FlowConfig::gin(2);
        Self {
            n_blocks: gin.n_blocks,
            hidden: gin.hidden,
            mode: gin.mode,
            constraint: gin.constraint,
            init: gin.init,
            identity_init: true,
        }
    }
}

impl ModelConfig {
    pub fn flow_config(&self, dim: usize) -> FlowConfig {
        FlowConfig {
            dim,
            n_blocks: self.n_blocks,
            hidden: self.hidden.clone(),
            mode: self.mode,
            constraint: self.constraint,
            init: self.init,
        }
    }

    pub fn final_init(&self) -> FinalLayerInit {
        if self.identity_init {
            FinalLayerInit::Zero
        } else {
            FinalLayerInit::Random
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    /// Pass when enough attempts recover the latents.
    #[default]
    Recover,
    /// Pass when enough attempts are flagged as degraded.
    Degrade,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Attempts {
    /// One full-experiment training run per seed; each overrides `train.seed`.
    pub train_seeds: Vec<u64>,
    /// Attempts that must meet the expectation.
    pub required: usize,
}

impl Default for Attempts {
    fn default() -> Self {
        Self {
            train_seeds: vec![0, 1, 2],
            required: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub data: GroundTruthSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: Thresholds,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub attempts: Attempts,
    #[serde(default)]
    pub expectation: Expectation,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("gin-output")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Five clusters, 100k samples.
    Exp1,
    /// Three clusters, 100k samples.
    Exp2,
    /// Five clusters, 10k samples; expected to degrade.
    SmallData,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Exp1)
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            version: CONFIG_VERSION,
            name: "exp1".into(),
            data: GroundTruthSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            analysis: Thresholds::default(),
            output_dir: default_output_dir(),
            attempts: Attempts::default(),
            expectation: Expectation::Recover,
        };
        match preset {
            Preset::Exp1 => base,
            Preset::Exp2 => Self {
                name: "exp2".into(),
                data: GroundTruthSpec {
                    n_classes: 3,
                    ..base.data
                },
                ..base
            },
            Preset::SmallData => Self {
                name: "small-data".into(),
                data: GroundTruthSpec {
                    n_samples: 10_000,
                    ..base.data
                },
                attempts: Attempts {
                    train_seeds: vec![0, 1, 2],
                    required: 1,
                },
                expectation: Expectation::Degrade,
                ..base
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config is not JSON: {e}")))?;
        match value.get("version") {
            None => return Err(CliError::Usage("config is missing the \"version\" key".into())),
            Some(v) if v.as_u64() != Some(CONFIG_VERSION as u64) => {
                return Err(CliError::Usage(format!(
                    "config version {v} is not supported (expected {CONFIG_VERSION})"
                )))
            }
            _ => {}
        }
        let config: Self =
            serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: gin_core::Error| CliError::Usage(e.to_string());
        self.data.validate().map_err(usage)?;
        self.model.flow_config(self.data.dim).validate().map_err(usage)?;
        self.train.validate(self.data.n_classes).map_err(usage)?;
        if self.attempts.train_seeds.is_empty() {
            return Err(CliError::Usage("attempts.train_seeds is empty".into()));
        }
        if self.attempts.required == 0 || self.attempts.required > self.attempts.train_seeds.len() {
            return Err(CliError::Usage(format!(
                "attempts.required must be in 1..={}",
                self.attempts.train_seeds.len()
            )));
        }
        Ok(())
    }

    /// Training config for one attempt.
    pub fn train_for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

/// Every leaf key of the default config in dotted form, with its default value.
pub fn config_keys() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let value = serde_json::to_value(ExperimentConfig::default()).expect("config serializes");
    let mut out = Vec::new();
    walk("", &value, &mut out);
    out
}

pub fn config_keys_help() -> String {
    let keys = config_keys();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (JSON, defaults shown):\n");
    for (k, v) in keys {
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_json() {
        for p in [Preset::Exp1, Preset::Exp2, Preset::SmallData] {
            let c = ExperimentConfig::preset(p);
            assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        }
    }

    #[test]
    fn version_is_required() {
        let err = ExperimentConfig::from_json("{}").unwrap_err();
        assert!(err.to_string().contains("version"));
        assert!(ExperimentConfig::from_json(r#"{"version": 9}"#).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"version": 1, "lr": 0.1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version": 1, "train": {"lr": 0.1}}"#).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = ExperimentConfig::from_json(r#"{"version": 1, "data": {"n_classes": 3}}"#).unwrap();
        assert_eq!(c.data.n_classes, 3);
        assert_eq!(c.data.n_samples, 100_000);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let err = ExperimentConfig::from_json(r#"{"version": 1, "train": {"batch_size": 1}}"#).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
        let err = ExperimentConfig::from_json(r#"{"version": 1, "attempts": {"required": 4}}"#).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }

    #[test]
    fn keys_cover_nested_sections() {
        let keys: Vec<String> = config_keys().into_iter().map(|(k, _)| k).collect();
        for k in ["version", "data.n_classes", "train.lr_initial", "analysis.min_abs_r", "attempts.required"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
    }
}
