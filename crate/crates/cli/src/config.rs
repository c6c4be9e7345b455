use amortized_transport::dataset::{Experiment, GenerateConfig, PriorConfig};
use amortized_transport::evaluation::ScalingConfig;
use amortized_transport::forward_models::{DarcyConfig, WaveConfig};
use amortized_transport::pcn::PcnConfig;
use amortized_transport::training::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

use crate::CliError;

fn default_block_size() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub id: Experiment,
    pub sigma_obs: f64,
    #[serde(default)]
    pub darcy: DarcyConfig,
    #[serde(default)]
    pub wave: WaveConfig,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    /// Rows written by `gen-data` unless `--n` is given.
    #[serde(default = "default_rows")]
    pub rows: usize,
}

fn default_rows() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcnSection {
    pub beta: f64,
    pub n_steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub adapt: bool,
}

impl Default for PcnSection {
    fn default() -> Self {
        let d = PcnConfig::default();
        Self {
            beta: d.beta,
            n_steps: d.n_steps,
            burn_in: d.burn_in,
            thin: d.thin,
            adapt: d.adapt,
        }
    }
}

impl PcnSection {
    pub fn with_seed(&self, seed: u64) -> PcnConfig {
        PcnConfig {
            beta: self.beta,
            n_steps: self.n_steps,
            burn_in: self.burn_in,
            thin: self.thin,
            adapt: self.adapt,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// W1 against the quadrature posterior (scalar experiment).
    W1,
    /// Squared energy distance against a quadrature resample (scalar experiment).
    EnergyDistance,
    PosteriorMean,
    /// Per-mode W1 against a reference ensemble.
    PerModeW1,
    /// Per-mode spread relative to the prior.
    SpreadRatio,
    /// Sample std of the constant-mode coefficient.
    ConstantModeStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Empty means every metric that applies to the experiment.
    pub metrics: Vec<Metric>,
    pub n_samples: usize,
    pub n_truth: usize,
    /// KL modes for field metrics.
    pub modes: Vec<usize>,
    pub scaling: ScalingConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metrics: Vec::new(),
            n_samples: 4000,
            n_truth: 10_000,
            modes: (1..=16).collect(),
            scaling: ScalingConfig::default(),
        }
    }
}

impl EvalSection {
    pub fn metrics_for(&self, experiment: Experiment, have_reference: bool) -> Vec<Metric> {
        if !self.metrics.is_empty() {
            return self.metrics.clone();
        }
        match experiment {
            Experiment::Quadratic => vec![Metric::W1, Metric::EnergyDistance, Metric::PosteriorMean],
            _ => {
                let mut m = vec![Metric::SpreadRatio, Metric::ConstantModeStd];
                if have_reference {
                    m.insert(0, Metric::PerModeW1);
                }
                m
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub out_dir: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
    /// Joint-reference rows used when sampling; defaults to the training dataset.
    pub reference_data: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentSection,
    pub prior: PriorConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub pcn: PcnSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn generate_config(&self) -> GenerateConfig {
        GenerateConfig {
            experiment: self.experiment.id,
            prior: self.prior.clone(),
            sigma_obs: self.experiment.sigma_obs,
            darcy: self.experiment.darcy.clone(),
            wave: self.experiment.wave.clone(),
            block_size: self.experiment.block_size,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generate_config().validate().map_err(CliError::Invalid)?;
        self.training.validate().map_err(CliError::Invalid)?;
        self.pcn.with_seed(0).validate().map_err(CliError::Invalid)?;
        if self.eval.n_samples == 0 || self.eval.n_truth == 0 {
            return Err(CliError::Schema("eval sample counts must be positive".into()));
        }
        Ok(())
    }
}

/// Reads a config file, applies `key.path=value` overrides and validates it.
pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<(RunConfig, Value), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    for (key, raw) in overrides {
        apply_override(&mut value, key, raw)?;
    }
    let cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    let resolved = serde_json::to_value(&cfg).map_err(|e| CliError::Schema(e.to_string()))?;
    Ok((cfg, resolved))
}

/// Sets the dotted `key` in `root`. The value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Schema(format!("bad override key '{key}'")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Schema(format!("override '{key}': '{part}' is inside a non-object")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| CliError::Schema(format!("override '{key}' targets a non-object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Splits `--a.b=v` overrides from the arguments meant for the parser.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some(body) = a.strip_prefix("--") {
            if let Some((k, v)) = body.split_once('=') {
                if k.contains('.') {
                    overrides.push((k.to_string(), v.to_string()));
                    continue;
                }
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn override_sets_nested_values() {
        let mut v = json!({"training": {"epochs": 3}});
        apply_override(&mut v, "training.adam.lr", "0.01").unwrap();
        apply_override(&mut v, "training.epochs", "7").unwrap();
        apply_override(&mut v, "model.variant", "cameron_martin").unwrap();
        assert_eq!(v["training"]["adam"]["lr"], json!(0.01));
        assert_eq!(v["training"]["epochs"], json!(7));
        assert_eq!(v["model"]["variant"], json!("cameron_martin"));
        assert!(apply_override(&mut v, "training.epochs.x", "1").is_err());
        assert!(apply_override(&mut v, "a..b", "1").is_err());
    }

    #[test]
    fn split_keeps_plain_flags() {
        let args = ["atrans", "train", "--config", "c.json", "--training.epochs=2", "--seed=4"]
            .map(String::from)
            .to_vec();
        let (rest, ov) = split_overrides(args);
        assert_eq!(rest, ["atrans", "train", "--config", "c.json", "--seed=4"]);
        assert_eq!(ov, [("training.epochs".to_string(), "2".to_string())]);
    }
}
