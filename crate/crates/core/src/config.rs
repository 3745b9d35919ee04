//! Run configuration from flat `section.key = value` files.
//!
//! The file is TOML restricted to dotted keys, e.g.
//!
//! ```text
//! train.batch_size = 32
//! train.mask_ratio = 0.8
//! diffusion.beta_max = 0.9
//! model.preset = "toy"
//! ```
//!
//! Unknown keys are rejected; missing keys take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, SsimConfig};
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::ttt::TttConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub total_steps: u64,
    pub mask_ratio: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub classifier_lr: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 32,
            lr: 2e-4,
            total_steps: 20_000,
            mask_ratio: 0.8,
            seed: 1234,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            classifier_lr: 2e-4,
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn classifier_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.classifier_lr,
            ..self.adam()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("train.mask_ratio {} must lie in (0, 1)", self.mask_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        self.adam().validate()?;
        self.classifier_adam().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_steps: 8,
            beta_min: 1e-4,
            beta_max: 0.9,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.t_steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    /// Full-size network.
    #[default]
    Full,
    /// Narrow network for single-core runs.
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: ModelPreset,
    pub seed: u64,
    pub pitch_norm: crate::features::PitchNorm,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: ModelPreset::Full,
            seed: 1234,
            pitch_norm: Default::default(),
        }
    }
}

impl ModelSection {
    pub fn build(&self) -> ModelConfig {
        let base = match self.preset {
            ModelPreset::Full => ModelConfig::default(),
            ModelPreset::Toy => ModelConfig::toy(),
        };
        ModelConfig {
            seed: self.seed,
            pitch_norm: self.pitch_norm,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub diffusion: DiffusionConfig,
    pub loss: LossWeights,
    pub ssim: SsimConfig,
    pub model: ModelSection,
    pub ttt: TttConfig,
}

impl RunConfig {
    /// Small network and short schedule for desk runs.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.model.preset = ModelPreset::Toy;
        c.train.batch_size = 8;
        c.train.lr = 5e-4;
        c.train.classifier_lr = 1e-3;
        c
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every key as `section.key = value`, one per line, in a stable order.
    pub fn to_flat(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = String::new();
        if let toml::Value::Table(sections) = value {
            for (section, body) in sections {
                if let toml::Value::Table(keys) = body {
                    for (k, v) in keys {
                        out.push_str(&format!("{section}.{k} = {v}\n"));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.diffusion.schedule()?;
        self.loss.validate()?;
        if self.ssim.window % 2 == 0 || self.ssim.window == 0 || !(self.ssim.sigma > 0.0) {
            return Err(Error::Config("ssim.window must be odd and ssim.sigma positive".into()));
        }
        self.ttt.validate()
    }
}
