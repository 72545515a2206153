//! Run configuration: one JSON document drives a whole training run —
//! architecture, loss weights, schedule, gating, replay, dataset, seed.
//! Everything downstream derives its randomness from `seed` through named
//! sub-streams, so a config file pins a run bit-exactly.

use crate::encoder::EncoderConfig;
use crate::error::HiclError;
use crate::objectives::LossWeights;
use crate::router::GatingMode;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Epochs, batch sizes, and optimizer step sizes for both training phases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub replay_batch_size: usize,
    pub lr: f64,
    /// Step size for the consolidation phase. Adam's update magnitude is
    /// invariant to the loss scale, so this — not the contrastive weight —
    /// is the knob that bounds how far Phase II may move the separation
    /// stage per step. Lower it if consolidation starts eroding fresh-task
    /// accuracy; the contrastive weight alone cannot do that job.
    pub lr_phase2: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs_phase1: 10,
            epochs_phase2: 4,
            batch_size: 16,
            replay_batch_size: 16,
            lr: 3e-4,
            lr_phase2: 3e-4,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_phase1 == 0 || self.batch_size == 0 {
            return Err(HiclError::Config(
                "epochs_phase1 and batch_size must be positive".into(),
            ));
        }
        // epochs_phase2 = 0 skips consolidation; replay_batch_size = 0
        // disables replay. Both are legitimate ablations.
        if !(self.lr > 0.0) {
            return Err(HiclError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_phase2 > 0.0) {
            return Err(HiclError::Config(format!(
                "lr_phase2 must be positive, got {}",
                self.lr_phase2
            )));
        }
        Ok(())
    }
}

/// Per-task replay store parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayConfig {
    /// Capacity B per task.
    pub capacity: usize,
    /// Priority exponent for sampling probabilities.
    pub alpha_per: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self { capacity: 200, alpha_per: 0.6 }
    }
}

/// Where the task stream comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetConfig {
    /// Gaussian class blobs with means on a sphere of radius `separation`.
    Synthetic {
        n_tasks: usize,
        classes_per_task: usize,
        dim: usize,
        separation: f64,
        train_per_class: usize,
        eval_per_class: usize,
    },
    /// IDX-format image/label files split class-contiguously into tasks.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        n_tasks: usize,
    },
}

impl DatasetConfig {
    pub fn n_tasks(&self) -> usize {
        match self {
            Self::Synthetic { n_tasks, .. } | Self::Idx { n_tasks, .. } => *n_tasks,
        }
    }
}

impl Default for DatasetConfig {
    /// Five synthetic tasks, 2 classes each, 64-d inputs.
    fn default() -> Self {
        Self::Synthetic {
            n_tasks: 5,
            classes_per_task: 2,
            dim: 64,
            separation: 10.0,
            train_per_class: 100,
            eval_per_class: 50,
        }
    }
}

/// Top-level run description; the published JSON schema mirrors this struct.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub n_experts: usize,
    pub gating: GatingMode,
    /// Softmax temperature τ for soft/hybrid gating.
    pub temperature: f64,
    /// Prototype EMA rate μ.
    pub proto_ema: f64,
    pub encoder: EncoderConfig,
    pub weights: LossWeights,
    pub schedule: TrainSchedule,
    pub replay: ReplayConfig,
    pub dataset: DatasetConfig,
    /// Compose the full objective literally (λ3/λ4 re-count EWC and replay
    /// on top of the Phase-I loss) instead of the default non-duplicated form.
    pub strict_paper_objective: bool,
    /// Phase-II cross term variant: score the current code against other
    /// prototypes rather than other codes against their own prototypes.
    pub phase2_cross_form: bool,
    /// Phase II consumes current-task batches.
    pub phase2_use_current: bool,
    /// Phase II consumes replayed batches.
    pub phase2_use_replay: bool,
    /// Keep EMA updates running during Phase II (default: prototypes frozen
    /// there, serving as fixed contrastive anchors).
    pub phase2_update_prototypes: bool,
    /// Advance old tasks' prototypes from the codes their experts produce on
    /// replayed samples during Phase I. Pure bookkeeping (no gradient); keeps
    /// a prototype aligned with its expert as shared stages keep moving after
    /// the task ends. Off by default: a prototype then freezes at task end.
    pub replay_refresh_prototypes: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_experts: 5,
            gating: GatingMode::Hard,
            temperature: 0.1,
            proto_ema: 0.01,
            encoder: EncoderConfig::default(),
            weights: LossWeights::default(),
            schedule: TrainSchedule::default(),
            replay: ReplayConfig::default(),
            dataset: DatasetConfig::default(),
            strict_paper_objective: false,
            phase2_cross_form: false,
            phase2_use_current: true,
            phase2_use_replay: true,
            phase2_update_prototypes: false,
            replay_refresh_prototypes: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.weights.validate()?;
        self.schedule.validate()?;
        if self.n_experts == 0 {
            return Err(HiclError::Config("n_experts must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(HiclError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.proto_ema) {
            return Err(HiclError::Config(format!(
                "proto_ema must lie in [0,1], got {}",
                self.proto_ema
            )));
        }
        if self.replay.capacity == 0 {
            return Err(HiclError::Config("replay capacity must be positive".into()));
        }
        if self.replay.alpha_per < 0.0 {
            return Err(HiclError::Config("alpha_per must be nonnegative".into()));
        }
        match &self.dataset {
            DatasetConfig::Synthetic { n_tasks, classes_per_task, dim, separation, train_per_class, eval_per_class } => {
                if *n_tasks == 0 || *classes_per_task == 0 || *dim == 0 || *train_per_class == 0 || *eval_per_class == 0 {
                    return Err(HiclError::Config("synthetic dataset fields must be positive".into()));
                }
                if !(*separation >= 0.0) {
                    return Err(HiclError::Config("separation must be nonnegative".into()));
                }
            }
            DatasetConfig::Idx { n_tasks, .. } => {
                if *n_tasks == 0 {
                    return Err(HiclError::Config("n_tasks must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HiclError::io(path.display().to_string(), e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| HiclError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| HiclError::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| HiclError::io(path.display().to_string(), e))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| HiclError::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| HiclError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
