//! Experiment configuration (TOML) and its canonical hash.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{LrSchedule, SgdConfig};
use crate::backbone::{AttachmentPlan, BackboneConfig, NormKind};
use crate::data::{DatasetSpec, LabeledImageDataset, Normalization};
use crate::error::{ensure, Result, SfeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 60,
            milestones: vec![30, 45],
            factor: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub train: usize,
    pub eval: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig { train: 64, eval: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    /// Weight initialization.
    pub model: u64,
    /// Shuffling and augmentation.
    pub data: u64,
    /// Channel partitions.
    pub partition: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Seeds {
            model: seed,
            data: seed,
            partition: seed,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub backbone: BackboneConfig,
    pub plan: AttachmentPlan,
    #[serde(default)]
    pub optimizer: SgdConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub batch: BatchConfig,
    #[serde(default)]
    pub seeds: Seeds,
    pub dataset: DatasetSpec,
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Per-channel statistics; filled from the training split when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| SfeError::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| SfeError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| SfeError::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SfeError::config(e.to_string()))
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.optimizer.lr,
            milestones: self.schedule.milestones.clone(),
            factor: self.schedule.factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.plan.validate(&self.backbone)?;
        self.lr_schedule().validate()?;
        ensure!(self.schedule.epochs >= 1, SfeError::config("schedule.epochs must be >= 1"));
        let o = &self.optimizer;
        ensure!(
            (0.0..1.0).contains(&o.momentum) && o.weight_decay >= 0.0 && o.weight_decay.is_finite(),
            SfeError::config("optimizer needs momentum in [0, 1) and weight_decay >= 0")
        );
        let min_batch = if self.backbone.norm == NormKind::BatchNorm { 2 } else { 1 };
        ensure!(
            self.batch.train >= min_batch && self.batch.eval >= 1,
            SfeError::config(format!("batch.train must be >= {min_batch} and batch.eval >= 1"))
        );
        ensure!(
            self.backbone.input_shape == self.dataset.image_shape(),
            SfeError::config(format!(
                "backbone input_shape {:?} does not match dataset images {:?}",
                self.backbone.input_shape,
                self.dataset.image_shape()
            ))
        );
        ensure!(
            self.backbone.num_classes == self.dataset.classes(),
            SfeError::config(format!(
                "backbone num_classes {} does not match the dataset's {}",
                self.backbone.num_classes,
                self.dataset.classes()
            ))
        );
        if let Some(n) = &self.normalization {
            n.validate(self.backbone.input_shape[0])?;
        }
        Ok(())
    }

    /// Validate and materialize defaults that depend on the data.
    pub fn resolve(mut self, train: &LabeledImageDataset) -> Result<Self> {
        self.validate()?;
        ensure!(
            train.shape == self.backbone.input_shape && train.classes == self.backbone.num_classes,
            SfeError::data("training split does not match the configured backbone")
        );
        if self.normalization.is_none() {
            self.normalization = Some(train.channel_stats());
        }
        Ok(self)
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
            .clone()
            .unwrap_or_else(|| Normalization::identity(self.backbone.input_shape[0]))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// A small synthetic configuration that trains in seconds.
    pub fn quick_synthetic() -> Self {
        ExperimentConfig {
            name: "quick".into(),
            backbone: BackboneConfig {
                stage_channels: vec![8, 16, 16],
                blocks_per_stage: 1,
                input_shape: [3, 16, 16],
                num_classes: 4,
                ..BackboneConfig::default()
            },
            plan: AttachmentPlan {
                k: 4,
                ..AttachmentPlan::default()
            },
            optimizer: SgdConfig {
                lr: 0.05,
                ..SgdConfig::default()
            },
            schedule: ScheduleConfig {
                epochs: 2,
                milestones: vec![1],
                factor: 0.1,
            },
            batch: BatchConfig { train: 16, eval: 64 },
            seeds: Seeds::default(),
            dataset: DatasetSpec::Synthetic {
                classes: 4,
                per_class: 16,
                test_per_class: 8,
                size: [3, 16, 16],
                seed: 0,
            },
            augment: true,
            normalization: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::AttachmentMode;

    const MINIMAL: &str = r#"
[backbone]
stage_channels = [8, 16, 32]
blocks_per_stage = 1
input_shape = [3, 16, 16]
num_classes = 4

[plan]
mode = "single@2"
k = 4
beta = 0.5

[dataset]
kind = "synthetic"
classes = 4
per_class = 8
test_per_class = 4
size = [3, 16, 16]
"#;

    #[test]
    fn minimal_toml_fills_defaults() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.plan.mode, AttachmentMode::SingleClassifierAtLayer(2));
        assert_eq!(c.optimizer, SgdConfig::default());
        assert_eq!(c.schedule.milestones, vec![30, 45]);
        assert_eq!(c.schedule.epochs, 60);
        assert!(c.augment);
        c.validate().unwrap();
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let (train, _) = c.dataset.load().unwrap();
        let r = c.resolve(&train).unwrap();
        assert!(r.normalization.is_some());
        let back = ExperimentConfig::from_toml_str(&r.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.hash(), r.hash());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::quick_synthetic();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seeds.model = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let mut c = ExperimentConfig::quick_synthetic();
        c.backbone.num_classes = 5;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::quick_synthetic();
        c.batch.train = 1;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::quick_synthetic();
        c.schedule.milestones = vec![5, 2];
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_toml_str("[plan]\nmode = \"five\"").is_err());
    }
}
