//! Run configuration: one JSON document covering every module.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degradation::{mix_seed, sha256_hex, DegradationConfig};
use crate::diffusion::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub count: usize,
    pub hr_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 8,
            hr_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 40 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub hist_bins: usize,
    pub sweep_steps: Vec<usize>,
    pub sweep_seeds: Vec<u64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            hist_bins: 32,
            sweep_steps: vec![30, 40, 50],
            sweep_seeds: vec![0, 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Fraction of `train.steps` each grid cell trains for.
    pub budget_fraction: f64,
    /// Sampling steps used to score each cell.
    pub sample_steps: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            budget_fraction: 0.25,
            sample_steps: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_name: String,
    pub output_dir: String,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub degradation: DegradationConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub metrics: MetricsConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "default".into(),
            output_dir: "out".into(),
            seed: 0,
            dataset: DatasetConfig::default(),
            degradation: DegradationConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            metrics: MetricsConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses JSON text; errors carry line and column.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        cfg.validate()
            .map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Compact JSON with fields in declaration order. Its hash names the run.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.canonical_json())
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) || self.run_name == ".."
        {
            return Err(Error::Validation(format!(
                "run_name {:?} is not a plain directory name",
                self.run_name
            )));
        }
        self.degradation.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.dataset.count == 0 {
            return Err(Error::Validation("dataset.count must be >= 1".into()));
        }
        let grid = self.degradation.scale_factor * self.model.patch_size * 4;
        if !self.dataset.hr_size.is_multiple_of(self.degradation.scale_factor * self.model.patch_size)
            || !(self.dataset.hr_size / self.model.patch_size).is_multiple_of(4)
        {
            return Err(Error::Validation(format!(
                "dataset.hr_size {} must be divisible by scale factor and patch size, with a latent grid divisible by 4 (e.g. multiples of {grid})",
                self.dataset.hr_size
            )));
        }
        if self.sample.steps == 0 || self.sample.steps > self.model.schedule.timesteps {
            return Err(Error::Validation(
                "sample.steps must lie in 1..=timesteps".into(),
            ));
        }
        if self.metrics.hist_bins < 2 {
            return Err(Error::Validation("metrics.hist_bins must be >= 2".into()));
        }
        if !(self.ablation.budget_fraction > 0.0 && self.ablation.budget_fraction <= 1.0) {
            return Err(Error::Validation(
                "ablation.budget_fraction must lie in (0, 1]".into(),
            ));
        }
        if self.ablation.sample_steps == 0 {
            return Err(Error::Validation(
                "ablation.sample_steps must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Training settings with the seed derived from the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: mix_seed(self.seed, 2),
            ..self.train.clone()
        }
    }

    pub fn model_seed(&self) -> u64 {
        mix_seed(self.seed, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_json(&c.canonical_json(), "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let c = RunConfig::from_json(r#"{"run_name": "x", "train": {"steps": 5}}"#, "mem").unwrap();
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.train.batch, TrainConfig::default().batch);
    }

    #[test]
    fn unknown_keys_fail_with_line_numbers() {
        let text = "{\n  \"run_name\": \"x\",\n  \"trian\": {}\n}";
        let err = RunConfig::from_json(text, "cfg.json")
            .unwrap_err()
            .to_string();
        assert!(err.contains("cfg.json") && err.contains("line 3"), "{err}");
        let nested = "{\n  \"train\": {\n    \"stpes\": 3\n  }\n}";
        let err = RunConfig::from_json(nested, "cfg.json")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3") && err.contains("stpes"), "{err}");
    }

    #[test]
    fn rejects_bad_sizes() {
        let c = RunConfig {
            dataset: DatasetConfig {
                count: 2,
                hr_size: 20,
            },
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
