//! Optimizer loop, schedules, validation and checkpoints.

pub mod checkpoint;
pub mod optimizer;
pub mod schedule;
pub mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointMeta, Tensor,
};
pub use optimizer::{clip_global_norm, global_norm, AdamW, AdamWSettings};
pub use schedule::{lr_schedule, perplexity, temperature_schedule, tokens_per_update};
pub use trainer::{validate, DataCursor, EvalRecord, StepReport, Trainer, ValidationReport};

/// Optimizer, batching and evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: u64,
    /// Planned optimizer steps; the schedules end here.
    pub total_steps: u64,
    /// Sequences per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub accum_steps: usize,
    pub clip_norm: f64,
    /// When set, replaces `total_steps` by the number of full updates that
    /// fit into this many passes over the training windows.
    pub epochs: Option<u64>,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_batches_cap: usize,
    /// Keep write-back and usage tracking active during validation.
    pub adaptive_eval: bool,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            warmup_steps: 50,
            total_steps: 2000,
            batch_size: 8,
            accum_steps: 2,
            clip_norm: 1.0,
            epochs: None,
            seed: 0,
            eval_every: 200,
            eval_batches_cap: 512,
            adaptive_eval: true,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 && self.epochs.is_none() {
            return Err(config_err!("total_steps must be at least 1"));
        }
        if self.warmup_steps > self.total_steps && self.epochs.is_none() {
            return Err(config_err!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps,
                self.total_steps
            ));
        }
        if !(self.clip_norm > 0.0) {
            return Err(config_err!("clip_norm must be positive"));
        }
        if self.batch_size == 0 || self.accum_steps == 0 {
            return Err(config_err!("batch_size and accum_steps must be at least 1"));
        }
        if !(self.peak_lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(config_err!("peak_lr and weight_decay must be nonnegative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.eval_every == 0 || self.eval_batches_cap == 0 {
            return Err(config_err!(
                "eval_every and eval_batches_cap must be at least 1"
            ));
        }
        Ok(())
    }

    /// Planned steps given the number of training windows.
    pub fn planned_steps(&self, train_windows: usize) -> u64 {
        match self.epochs {
            Some(e) => {
                let per_update = (self.batch_size * self.accum_steps) as u64;
                (e * train_windows as u64 / per_update).max(1)
            }
            None => self.total_steps,
        }
    }

    pub fn adamw(&self) -> AdamWSettings {
        AdamWSettings {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}
