//! The single JSON document describing a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GeneratorConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub generator: Option<GenerateConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Dataset files and the evaluation protocol.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Complete test series, missing timesteps included.
    #[serde(default)]
    pub test_truth: Option<PathBuf>,
    /// Training uses only timesteps with `t < train_window`.
    #[serde(default)]
    pub train_window: Option<f64>,
    /// Forecast from the timesteps with `t < context`; imputation when absent.
    #[serde(default)]
    pub context: Option<f64>,
    /// Forecast length after `context`; the rest of the series when absent.
    #[serde(default)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub name: String,
    pub n_sequences: usize,
}

/// Synthetic data generation; `splits` defaults to the dataset's
/// train/val/test sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub dataset: Dataset,
    #[serde(default)]
    pub length: Option<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub missing: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub splits: Option<Vec<SplitSpec>>,
}

fn default_dt() -> f64 {
    0.1
}

fn default_noise() -> f64 {
    0.05
}

impl GenerateConfig {
    pub fn new(dataset: Dataset, seed: u64) -> Self {
        Self { dataset, length: None, dt: default_dt(), noise_std: default_noise(), missing: 0.0, seed, splits: None }
    }

    pub fn base(&self) -> GeneratorConfig {
        GeneratorConfig {
            dataset: self.dataset,
            n_sequences: 0,
            length: self.length.unwrap_or(self.dataset.default_length()),
            dt: self.dt,
            noise_std: self.noise_std,
            missing: self.missing,
            seed: self.seed,
        }
    }

    pub fn split_sizes(&self) -> Vec<(String, usize)> {
        match &self.splits {
            Some(s) => s.iter().map(|s| (s.name.clone(), s.n_sequences)).collect(),
            None => ["train", "val", "test"].iter().map(|s| s.to_string()).zip(self.dataset.default_splits()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Sample trajectories per sequence.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_samples() -> usize {
    50
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: default_samples(), seed: 0 }
    }
}

fn dotted(path: &serde_path_to_error::Path) -> String {
    let s = path.to_string();
    if s == "." {
        String::new()
    } else {
        s
    }
}

impl RunConfig {
    /// Parses and validates; failures name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = dotted(e.path());
            Error::config(key, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`; relative data paths resolve against its directory and
    /// are stored absolute, so an echoed copy loads from anywhere.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.data.train, &mut config.data.test, &mut config.data.test_truth, &mut config.output_dir] {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = std::path::absolute(base.join(&*p))?;
                }
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(w) = self.data.train_window {
            if !(w > 0.0) {
                return Err(Error::config("data.train_window", "must be positive"));
            }
        }
        if let Some(h) = self.data.horizon {
            if !(h > 0.0) {
                return Err(Error::config("data.horizon", "must be positive"));
            }
            if self.data.context.is_none() {
                return Err(Error::config("data.horizon", "requires data.context"));
            }
        }
        if self.data.context.is_some_and(|c| !c.is_finite()) {
            return Err(Error::config("data.context", "must be finite"));
        }
        if self.eval.samples == 0 {
            return Err(Error::config("eval.samples", "must be at least 1"));
        }
        if let Some(g) = &self.generator {
            let mut base = g.base();
            base.n_sequences = 1;
            base.validate()?;
            if base.dataset.dim() != self.model.obs_dim {
                return Err(Error::config("model.obs_dim", "differs from the generator's observation dimension"));
            }
            if g.split_sizes().iter().any(|(name, _)| name.is_empty() || name.contains(['/', '\\'])) {
                return Err(Error::config("generator.splits", "split names must be plain file stems"));
            }
        }
        Ok(())
    }

    /// Pretty JSON with every default spelled out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
