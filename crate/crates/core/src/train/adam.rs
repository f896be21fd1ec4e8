use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments in parameter-store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update from the accumulated gradients, which
    /// are zeroed afterwards. A non-finite gradient aborts before anything
    /// is modified.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        if let Some(p) = store.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in parameter '{}'", p.name)));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * g[i];
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * g[i] * g[i];
                *w -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
        log::debug!("clipped gradient norm {norm:.4} to {max_norm}");
    }
    norm
}
