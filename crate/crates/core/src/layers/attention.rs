use rand::Rng;

use super::Linear;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Var};

/// Multi-head self-attention over the token axis of `[B×S×D]` inputs.
///
/// Here the tokens are the stocks of one trading day and the batch axis is
/// time, so every stock attends to every other stock at the same step.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            w_q: Linear::new(store, rng, &format!("{name}.w_q"), dim, dim, false)?,
            w_k: Linear::new(store, rng, &format!("{name}.w_k"), dim, dim, false)?,
            w_v: Linear::new(store, rng, &format!("{name}.w_v"), dim, dim, false)?,
            w_o: Linear::new(store, rng, &format!("{name}.w_o"), dim, dim, false)?,
            heads,
            dim,
        })
    }

    fn split_heads(&self, g: &Graph, x: Var, b: usize, s: usize) -> Result<Var> {
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[b, s, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * self.heads, s, dh])
    }

    /// Returns the projected output `[B×S×D]` and the attention weights
    /// `[B·heads×S×S]`.
    pub fn forward_with_weights(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let shape = g.shape(x);
        let [b, s, d] = shape[..] else {
            return Err(Error::Shape(format!("attention expects [B×S×D], got {shape:?}")));
        };
        if s == 0 {
            return Err(Error::Data("attention over an empty stock universe".into()));
        }
        if d != self.dim {
            return Err(Error::Shape(format!("attention width {} vs input {shape:?}", self.dim)));
        }
        let q = self.split_heads(g, self.w_q.forward(g, store, x)?, b, s)?;
        let k = self.split_heads(g, self.w_k.forward(g, store, x)?, b, s)?;
        let v = self.split_heads(g, self.w_v.forward(g, store, x)?, b, s)?;
        let dh = (self.dim / self.heads) as f64;
        let logits = g.scale(g.bmm(q, g.transpose(k)?)?, 1.0 / dh.sqrt());
        let weights = g.softmax(logits, 2)?;
        let mixed = g.bmm(weights, v)?;
        let mixed = g.reshape(mixed, &[b, self.heads, s, self.dim / self.heads])?;
        let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = g.reshape(mixed, &[b, s, self.dim])?;
        Ok((self.w_o.forward(g, store, mixed)?, weights))
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, x)?.0)
    }
}
