//! The single run configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::maintenance::MaintenanceConfig;
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::training::TrainConfig;

/// Everything a training run needs, as one JSON document with four
/// sections. Unknown keys are rejected at every level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub maintenance: MaintenanceConfig,
}

/// Peak learning rate of the desk presets. The small trunk tolerates, and
/// needs, a larger step than the full-size default.
pub const DESK_PEAK_LR: f64 = 2e-3;

impl RunConfig {
    /// Desk-scale memory model with its training schedule.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.train.peak_lr = DESK_PEAK_LR;
        c
    }

    /// [`RunConfig::desk`] with dense feed-forward blocks.
    pub fn desk_baseline() -> Self {
        Self {
            model: ModelConfig::desk_baseline(),
            ..Self::desk()
        }
    }

    /// Full-size memory model: 8 sequences of 1024 tokens, 33 micro-batches
    /// per update.
    pub fn base() -> Self {
        let mut c = Self {
            model: ModelConfig::base(),
            ..Self::default()
        };
        c.train.accum_steps = 33;
        c
    }

    pub fn base_baseline() -> Self {
        Self {
            model: ModelConfig::base_baseline(),
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.is_memory() {
            self.loss.validate(self.model.n_slots)?;
        }
        self.maintenance.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
