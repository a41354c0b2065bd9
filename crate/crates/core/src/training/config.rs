use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_IOBB_THRESH, DEFAULT_SCORE_THRESH};
use crate::model::ModelConfig;

/// Multiply the learning rate by `gamma` every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: usize,
    pub gamma: f64,
}

/// Run configuration; serialized as TOML with every key optional.
///
/// ```toml
/// seed = 7
/// epochs = 20
/// batch_size = 2
/// lr = 0.02
/// momentum = 0.9
/// clip_norm = 1.0
/// patience = 10
/// val_fraction = 0.1
/// decay = { every = 10, gamma = 0.5 }
/// log_var_floor = -3.0
///
/// [model]
/// mode = "mdf"
/// fusion = "sum"
/// image_size = 64
/// spatial = { e = 6, channels = 8, out_channels = 1 }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub decay: Option<StepDecay>,
    /// Lower bound on each `log α²`, applied after every step. A loss term
    /// that a model can drive to ~0 otherwise sends its weight `1/(2α²)`
    /// to infinity and its gradient swamps the clipped update.
    pub log_var_floor: Option<f64>,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub score_thresh: f64,
    pub iobb_thresh: f64,
    /// Draw fresh anchor/RoI samples every epoch. When off, each image
    /// reuses the same sampling stream in every epoch.
    pub resample: bool,
    /// Share of the training split held out for model selection.
    pub val_fraction: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            epochs: 20,
            batch_size: 2,
            lr: 0.02,
            momentum: 0.9,
            clip_norm: Some(1.0),
            decay: None,
            log_var_floor: Some(-3.0),
            patience: 10,
            score_thresh: DEFAULT_SCORE_THRESH,
            iobb_thresh: DEFAULT_IOBB_THRESH,
            resample: true,
            val_fraction: 0.1,
            model: ModelConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("invalid optimizer settings lr={} momentum={}", self.lr, self.momentum)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if self.log_var_floor.is_some_and(|f| !f.is_finite()) {
            return Err(Error::Config("log_var_floor must be finite".into()));
        }
        if let Some(d) = self.decay {
            if d.every == 0 || !(d.gamma > 0.0 && d.gamma.is_finite()) {
                return Err(Error::Config("decay needs every > 0 and gamma > 0".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.score_thresh) || !(0.0..=1.0).contains(&self.iobb_thresh) {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay {
            Some(d) => self.lr * d.gamma.powi((epoch / d.every) as i32),
            None => self.lr,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        let partial = TrainConfig::from_toml("epochs = 3\n[model]\nmode = \"baseline\"\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.model.mode, Mode::Baseline);
        assert_eq!(partial.model.image_size, 64);
        assert!(TrainConfig::from_toml("epochz = 3").is_err());
        assert!(TrainConfig::from_toml("lr = -1.0").is_err());
    }

    #[test]
    fn step_decay() {
        let cfg = TrainConfig { lr: 0.1, decay: Some(StepDecay { every: 2, gamma: 0.5 }), ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..5).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs, vec![0.1, 0.1, 0.05, 0.05, 0.025]);
    }
}
