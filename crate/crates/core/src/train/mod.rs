//! Optimisation loop: Adam with warmup and cosine restarts, one trading day
//! per sample, global gradient clipping.

mod adam;
mod checkpoint;
mod schedule;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{clip_grad_norm, AdamConfig, AdamState};
pub use checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use schedule::LrSchedule;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{mse_loss, DftModel};
pub use crate::seed::sub_seed;
use crate::tensor::{Graph, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// Trading days averaged per optimizer step.
    pub batch: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            batch: 1,
            seed: 0,
            checkpoint_every: 0,
            clip_norm: 3.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("train.clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer state plus the next epoch to run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(store: &ParamStore, config: &TrainConfig) -> Self {
        Self {
            adam: AdamState::new(store, config.adam),
            epoch: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Learning rate of the first step.
    pub lr: f64,
    pub mean_loss: f64,
    /// Mean pre-clip global gradient norm over the steps.
    pub grad_norm: f64,
    pub max_grad_norm: f64,
    pub clipped_steps: usize,
    pub wall_ms: u64,
}

/// Mean per-day loss without touching gradients.
pub fn evaluate_loss(model: &DftModel, store: &ParamStore, samples: &[&Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let g = Graph::new();
        let out = model.forward(&g, store, &s.features, &s.market)?;
        total += g.value(mse_loss(&g, out.predictions, &s.labels)?).data()[0];
    }
    Ok(total / samples.len() as f64)
}

/// Runs epoch `state.epoch` over `samples` and advances the state.
pub fn train_epoch(
    model: &DftModel,
    store: &mut ParamStore,
    samples: &[&Sample],
    state: &mut TrainState,
    config: &TrainConfig,
) -> Result<EpochStats> {
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let started = Instant::now();
    let epoch = state.epoch;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(
        config.seed,
        "shuffle",
        epoch as u64,
    )));

    let steps = order.len().div_ceil(config.batch);
    let mut stats = EpochStats {
        epoch,
        lr: config.schedule.lr_at(epoch as f64),
        mean_loss: 0.0,
        grad_norm: 0.0,
        max_grad_norm: 0.0,
        clipped_steps: 0,
        wall_ms: 0,
    };
    store.zero_grads();
    for (step, chunk) in order.chunks(config.batch).enumerate() {
        for &i in chunk {
            let s = samples[i];
            let g = Graph::new();
            let out = model.forward(&g, store, &s.features, &s.market)?;
            let loss = mse_loss(&g, out.predictions, &s.labels)?;
            stats.mean_loss += g.value(loss).data()[0];
            let scaled = g.scale(loss, 1.0 / chunk.len() as f64);
            g.backward(scaled, store)?;
        }
        let norm = clip_grad_norm(store, config.clip_norm);
        if norm > config.clip_norm {
            stats.clipped_steps += 1;
        }
        stats.grad_norm += norm;
        stats.max_grad_norm = stats.max_grad_norm.max(norm);
        let lr = config.schedule.lr_at(epoch as f64 + step as f64 / steps as f64);
        state
            .adam
            .step(store, lr)
            .map_err(|e| Error::Numeric(format!("epoch {epoch}, step {step}: {e}")))?;
    }
    stats.mean_loss /= samples.len() as f64;
    stats.grad_norm /= steps as f64;
    stats.wall_ms = started.elapsed().as_millis() as u64;
    state.epoch += 1;
    Ok(stats)
}
