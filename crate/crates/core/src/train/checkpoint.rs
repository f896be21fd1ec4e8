//! `DFT1` checkpoints: model parameters, then Adam moments as
//! `adam.m.{name}` / `adam.v.{name}`, then a JSON trailer with the model
//! configuration and progress counters.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, TrainState};
use crate::error::{Error, Result};
use crate::framing::{self, TensorFile, CHECKPOINT_MAGIC};
use crate::model::{DftModel, ModelConfig};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Next epoch to run.
    pub epoch: usize,
    pub adam_step: u64,
    pub adam: AdamConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub file: TensorFile,
}

pub fn encode_checkpoint(config: &ModelConfig, store: &ParamStore, state: &TrainState) -> Result<Vec<u8>> {
    if state.adam.m.len() != store.len() {
        return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
    }
    let names: Vec<(String, String)> = store
        .iter()
        .map(|p| (format!("adam.m.{}", p.name), format!("adam.v.{}", p.name)))
        .collect();
    let tensors = store
        .iter()
        .map(|p| (p.name.as_str(), &p.value))
        .chain(names.iter().zip(&state.adam.m).map(|((m, _), t)| (m.as_str(), t)))
        .chain(names.iter().zip(&state.adam.v).map(|((_, v), t)| (v.as_str(), t)));
    let meta = CheckpointMeta {
        model: config.clone(),
        epoch: state.epoch,
        adam_step: state.adam.step,
        adam: state.adam.config,
    };
    framing::encode(CHECKPOINT_MAGIC, tensors, &serde_json::to_string(&meta)?)
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, store: &ParamStore, state: &TrainState) -> Result<()> {
    framing::write_file(path, &encode_checkpoint(config, store, state)?)
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let file = framing::decode(CHECKPOINT_MAGIC, bytes)?;
        let meta = serde_json::from_str(&file.trailer).map_err(|e| Error::Checkpoint(format!("bad trailer: {e}")))?;
        Ok(Self { meta, file })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&framing::read_file(path)?)
    }

    /// Copies parameters and optimizer moments into `store`. Every tensor
    /// must match a parameter by name and shape, and every parameter must
    /// be present; the first offender is named.
    pub fn restore(&self, store: &mut ParamStore) -> Result<TrainState> {
        let mut values: Vec<Option<Tensor>> = vec![None; store.len()];
        let mut m = vec![None; store.len()];
        let mut v = vec![None; store.len()];
        for (name, t) in &self.file.tensors {
            let (slot, param) = if let Some(p) = name.strip_prefix("adam.m.") {
                (&mut m, p)
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                (&mut v, p)
            } else {
                (&mut values, name.as_str())
            };
            let id = store
                .id(param)
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' has no matching model parameter")))?;
            let want = store.value(id).shape();
            if t.shape() != want {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}': checkpoint shape {:?}, model shape {want:?}",
                    t.shape()
                )));
            }
            slot[id.index()] = Some(t.clone());
        }
        let ids: Vec<_> = store.ids().collect();
        let take = |slot: &mut Vec<Option<Tensor>>, prefix: &str| -> Result<Vec<Tensor>> {
            ids.iter()
                .map(|&id| {
                    slot[id.index()].take().ok_or_else(|| {
                        Error::Checkpoint(format!("checkpoint lacks tensor '{prefix}{}'", store.get(id).name))
                    })
                })
                .collect()
        };
        let values = take(&mut values, "")?;
        let m = take(&mut m, "adam.m.")?;
        let v = take(&mut v, "adam.v.")?;
        for (id, t) in ids.into_iter().zip(values) {
            store.set_value(id, t)?;
        }
        store.zero_grads();
        Ok(TrainState {
            adam: AdamState {
                config: self.meta.adam,
                step: self.meta.adam_step,
                m,
                v,
            },
            epoch: self.meta.epoch,
        })
    }
}

/// Rebuilds the model described by the checkpoint and restores its state.
pub fn load_checkpoint(path: &Path) -> Result<(DftModel, ParamStore, TrainState)> {
    let ckpt = Checkpoint::read(path)?;
    let (model, mut store) = DftModel::new(&ckpt.meta.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let state = ckpt.restore(&mut store)?;
    Ok((model, store, state))
}
