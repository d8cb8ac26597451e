//! Experiment configuration: JSON file, defaults, and dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{AdapterTemplate, BackboneConfig, TuningMode};
use crate::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f32,
    pub dice: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.002,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-5,
            epochs: 10,
            batch_size: 8,
            loss_weights: LossWeights { ce: 0.5, dice: 0.5 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer()?;
        let w = self.loss_weights;
        if w.ce < 0.0 || w.dice < 0.0 || (w.ce == 0.0 && w.dice == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative and not both zero, got ce={} dice={}",
                w.ce, w.dice
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Result<Adam> {
        Adam::new(self.lr, self.betas.0, self.betas.1, self.eps, self.weight_decay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub images: usize,
    /// Training accuracy below this fails the run; 0 disables the gate.
    pub min_accuracy: f64,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            images: 2000,
            min_accuracy: 0.9,
            train: TrainConfig {
                lr: 0.001,
                epochs: 3,
                batch_size: 16,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub mode: TuningMode,
    pub volumes: usize,
    pub train_volumes: usize,
    /// `[D, H, W]`; `H` and `W` must equal the backbone image size.
    pub dims: [usize; 3],
    pub classes: usize,
    pub train: TrainConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: TuningMode::MedTuning,
            volumes: 40,
            train_volumes: 32,
            dims: [16, 32, 32],
            classes: 4,
            train: TrainConfig {
                epochs: 12,
                batch_size: 2,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub adapter: AdapterTemplate,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

fn config_err(e: serde_json::Error) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text).map_err(config_err)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = crate::codec::read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.pretrain.train.validate()?;
        self.finetune.train.validate()?;
        let f = &self.finetune;
        if f.volumes == 0 || f.train_volumes == 0 || f.train_volumes >= f.volumes {
            return Err(Error::Config(format!(
                "need 0 < train_volumes < volumes, got {} of {}",
                f.train_volumes, f.volumes
            )));
        }
        if f.dims[1] != self.backbone.image_size || f.dims[2] != self.backbone.image_size {
            return Err(Error::Config(format!(
                "volume slices {}x{} must match backbone image_size {}",
                f.dims[1], f.dims[2], self.backbone.image_size
            )));
        }
        if self.pretrain.images == 0 || !(0.0..=1.0).contains(&self.pretrain.min_accuracy) {
            return Err(Error::Config(
                "pretrain needs images >= 1 and min_accuracy in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Applies every override in order, then validates the result once so
    /// coupled fields can change together.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            self.set(o.as_ref())?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Applies `a.b.c=value`. The value is parsed as JSON, falling back to a
    /// bare string; the path must already exist. Cross-field rules are left
    /// to [`ExperimentConfig::validate`].
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let mut root = serde_json::to_value(&*self).map_err(config_err)?;
        let mut slot = &mut root;
        for key in path.split('.') {
            slot = match slot {
                Value::Object(map) => map.get_mut(key),
                Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let next: ExperimentConfig =
            serde_json::from_value(root).map_err(|e| Error::Config(format!("override {assignment:?}: {e}")))?;
        *self = next;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), c);
        assert_eq!(c.finetune.train.lr, 0.002);
        assert_eq!(c.finetune.train.weight_decay, 1e-5);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"sed": 1}"#),
            Err(Error::Config(_))
        ));
        let mut c = ExperimentConfig::default();
        assert!(c.set("finetune.train.learning_rate=0.1").is_err());
        assert!(c.set("seed").is_err());
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::default();
        c.set("finetune.train.lr=0.01").unwrap();
        c.set("finetune.mode=head").unwrap();
        c.set("adapter.inter_mode=max").unwrap();
        c.set("finetune.dims.0=8").unwrap();
        c.set("seed=42").unwrap();
        assert_eq!(c.finetune.train.lr, 0.01);
        assert_eq!(c.finetune.mode, TuningMode::Head);
        assert_eq!(c.finetune.dims, [8, 32, 32]);
        assert_eq!(c.seed, 42);
        assert!(c.set("finetune.mode=everything").is_err());
        assert!(c.clone().with_overrides(&["finetune.train.lr=0"]).is_err());
        let flat = c
            .with_overrides(&[
                "backbone.stage_dims=[24]",
                "backbone.stage_depths=[2]",
                "backbone.heads=[2]",
            ])
            .unwrap();
        assert_eq!(flat.backbone.stage_depths, vec![2]);
    }
}
