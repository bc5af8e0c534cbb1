//! Two-stage training orchestration, configuration and checkpoints.

mod checkpoint;
mod stage1;
mod stage2;

pub use checkpoint::{AdamState, Checkpoint, CHECKPOINT_VERSION};
pub use stage1::{load_id_extractor, load_imitator, run_extractor, run_stage1, ExtractorOutcome, Stage1Options, Stage1Outcome};
pub(crate) use stage2::{source_images, target_images};
pub use stage2::{load_perception, ablation_run, run_stage2, Ablation, ProbePoint, Stage2Outcome, Stage2Report};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aux_extractors::{IdNetConfig, IdTrainConfig};
use crate::error::{Error, Result};
use crate::imitator::{ImitatorConfig, ImitatorTrainConfig};
use crate::objectives::ObjectiveConfig;
use crate::perception::PerceptionConfig;
use crate::procgen::Manifest;

pub const IMITATOR_CKPT: &str = "imitator.ckpt";
pub const IMITATOR_PARTIAL: &str = "imitator.partial.ckpt";
pub const IMITATOR_LOSS_CSV: &str = "imitator_loss.csv";
pub const EXTRACTOR_CKPT: &str = "id_extractor.ckpt";
pub const PERCEPTION_CKPT: &str = "perception.ckpt";
pub const STAGE2_LOSS_CSV: &str = "losses.csv";
pub const STAGE2_REPORT: &str = "report.json";

/// Learning rate multiplied by `decay` after each milestone epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            milestones: vec![50, 100],
            decay: 0.5,
        }
    }
}

impl Schedule {
    /// Rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch > m).count();
        self.lr * self.decay.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Invalid(format!("bad schedule {self:?}")));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("schedule milestones must be strictly ascending".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub target_batch: usize,
    /// Identities per source sub-batch (K+1), two views each.
    pub source_identities: usize,
    pub schedule: Schedule,
    pub checkpoint_every: usize,
    /// Images per domain used by the checkpoint probes.
    pub probe_images: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 60,
            steps_per_epoch: 50,
            target_batch: 32,
            source_identities: 8,
            schedule: Schedule::default(),
            checkpoint_every: 10,
            probe_images: 256,
        }
    }
}

/// Every knob of a training run; serialized as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub imitator: ImitatorConfig,
    pub imitator_train: ImitatorTrainConfig,
    pub id_net: IdNetConfig,
    pub id_train: IdTrainConfig,
    pub perception: PerceptionConfig,
    pub objective: ObjectiveConfig,
    pub stage2: Stage2Config,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            imitator: ImitatorConfig::default(),
            imitator_train: ImitatorTrainConfig::default(),
            id_net: IdNetConfig::default(),
            id_train: IdTrainConfig::default(),
            perception: PerceptionConfig::default(),
            objective: ObjectiveConfig::default(),
            stage2: Stage2Config::default(),
        }
    }
}

impl TrainConfig {
    /// Shortened schedules matching [`CorpusConfig::smoke`](crate::procgen::CorpusConfig::smoke).
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.imitator_train.epochs = 8;
        cfg.stage2.epochs = 10;
        cfg.stage2.checkpoint_every = 5;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("config {} ({e})", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.imitator.validate()?;
        self.perception.validate()?;
        self.objective.validate()?;
        self.stage2.schedule.validate()?;
        let s = &self.stage2;
        if s.target_batch < 2 || s.source_identities < 2 || s.steps_per_epoch == 0 || s.checkpoint_every == 0 {
            return Err(Error::Invalid("stage-2 batch sizes, steps and checkpoint interval must be positive".into()));
        }
        if self.imitator_train.batch_size == 0 || self.id_train.batch_size == 0 {
            return Err(Error::Invalid("batch sizes must be positive".into()));
        }
        let sizes = [self.imitator.image_size, self.perception.image_size, self.id_net.image_size];
        if sizes.iter().any(|&s| s != sizes[0]) {
            return Err(Error::Invalid(format!("image sizes disagree across networks: {sizes:?}")));
        }
        if self.imitator.param_dim != self.perception.param_dim {
            return Err(Error::Invalid("imitator and regressor parameter dimensions differ".into()));
        }
        Ok(())
    }

    /// Checks the config against a corpus manifest.
    pub fn check_manifest(&self, m: &Manifest) -> Result<()> {
        if m.image_size != self.imitator.image_size || m.param_dim != self.imitator.param_dim {
            return Err(Error::Invalid(format!(
                "corpus is {0}×{0} with P = {1}, config expects {2}×{2} with P = {3}",
                m.image_size, m.param_dim, self.imitator.image_size, self.imitator.param_dim
            )));
        }
        Ok(())
    }
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}
