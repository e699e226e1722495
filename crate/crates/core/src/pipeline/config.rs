use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SyntheticConfig;
use crate::error::{Error, Result};
use crate::expr_vae::VaeConfig;
use crate::losses::LossConfig;
use crate::nets::NetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    /// Discriminator learning rate; defaults to `lr` when absent.
    pub disc_lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 5e-5, disc_lr: None, beta1: 0.5, beta2: 0.9, eps: 1e-8 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() || self.disc_lr.is_some_and(|l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }

    pub fn discriminator_lr(&self) -> f64 {
        self.disc_lr.unwrap_or(self.lr)
    }
}

/// Sampling ranges for the driving-frame augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Largest rotation, degrees.
    pub max_rotation_deg: f64,
    pub scale_range: [f64; 2],
    /// Largest translation per axis, normalized units.
    pub max_translation: f64,
}

/// Upper bounds accepted for [`AugmentConfig`].
pub const MAX_ROTATION_DEG: f64 = 45.0;
pub const MAX_SCALE_RANGE: [f64; 2] = [0.5, 2.0];
pub const MAX_TRANSLATION: f64 = 0.5;

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { max_rotation_deg: 15.0, scale_range: [0.85, 1.15], max_translation: 0.1 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { max_rotation_deg: 0.0, scale_range: [1.0, 1.0], max_translation: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(0.0..=MAX_ROTATION_DEG).contains(&self.max_rotation_deg)
            || !((MAX_SCALE_RANGE[0]..=1.0).contains(&lo) && (1.0..=MAX_SCALE_RANGE[1]).contains(&hi))
            || !(0.0..=MAX_TRANSLATION).contains(&self.max_translation)
        {
            return Err(Error::Config(format!(
                "augmentation ranges outside caps: rotation <= {MAX_ROTATION_DEG} deg, scale within {MAX_SCALE_RANGE:?} \
                 and containing 1, translation <= {MAX_TRANSLATION}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Folder { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Steps between checkpoints written by the CLI trainer; 0 disables them.
    pub checkpoint_every: usize,
    pub pose_provider: String,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub vae: VaeConfig,
    pub vae_steps: usize,
    pub data: DataSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1000,
            batch_size: 4,
            checkpoint_every: 100,
            pose_provider: "oracle".into(),
            net: NetConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            vae: VaeConfig::default(),
            vae_steps: 2000,
            data: DataSource::default(),
        }
    }
}

impl RunConfig {
    /// Settings for short CPU runs on the synthetic set.
    pub fn toy() -> Self {
        Self { steps: 500, optim: OptimConfig { lr: TOY_LR, ..OptimConfig::default() }, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.augment.validate()?;
        self.vae.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.vae.expr_dim != self.net.expr_dim {
            return Err(Error::Config(format!(
                "vae.expr_dim {} differs from net.expr_dim {}",
                self.vae.expr_dim, self.net.expr_dim
            )));
        }
        crate::nets::pose_provider(&self.pose_provider)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Learning rate of [`RunConfig::toy`].
pub const TOY_LR: f64 = 2e-4;
