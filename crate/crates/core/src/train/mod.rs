//! Optimisation: AdamW, the step-decay learning-rate schedule, the epoch
//! loop with loss balancing, checkpoints and the (m, n) grid search.

mod adamw;
mod checkpoint;
mod grid;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::Variant;

pub use adamw::{adamw_step, AdamHyper, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use grid::{grid_search, GridCell, GridReport};
pub use trainer::{evaluate, EpochLog, Evaluation, TrainState, TrainingSet, EPOCH_CSV_HEADER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    /// Epochs at the initial rate before decay starts.
    pub warm_epochs: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Fraction of the training set held out for per-epoch evaluation.
    pub holdout_fraction: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 30,
            lr0: 1e-3,
            warm_epochs: 50,
            decay_every: 10,
            decay_factor: 0.95,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            seed: 0,
            holdout_fraction: 0.1,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults with the schedule of `variant`: 3D models hold the rate for
    /// 100 epochs and decay every 20, the 2D model 50 and 10.
    pub fn for_variant(variant: Variant) -> Self {
        let mut c = Self::default();
        if variant.is_3d() {
            c.warm_epochs = 100;
            c.decay_every = 20;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::config("batch_size and decay_every must be positive"));
        }
        if !(self.lr0 > 0.0) || !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("lr0 and adam_eps must be positive, weight_decay non-negative"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::config(format!("decay_factor {} outside (0, 1)", self.decay_factor)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config(format!("holdout_fraction {} outside [0, 1)", self.holdout_fraction)));
        }
        self.loss.validate()
    }

    pub fn adam(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Learning rate of (0-based) `epoch`: `lr0` during the warm phase, then
/// cut by `decay_factor` at its start and every `decay_every` epochs.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.warm_epochs {
        return config.lr0;
    }
    let cuts = (epoch - config.warm_epochs) / config.decay_every + 1;
    config.lr0 * config.decay_factor.powi(cuts as i32)
}
