use rand::Rng;

use super::{LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Previous-step view of `[B×T×D]`: step 0 sees a zero vector.
fn token_shift(g: &Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x);
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let zero = g.constant(Tensor::zeros(&[b, 1, d]));
    if t == 1 {
        return Ok(zero);
    }
    let head = g.slice(x, 1, 0, t - 1)?;
    g.concat(&[zero, head], 1)
}

/// `μ⊙x_t + (1−μ)⊙x_{t−1}`, written as `prev + μ⊙(x − prev)`.
fn interpolate(g: &Graph, store: &ParamStore, x: Var, prev: Var, mu: ParamId) -> Result<Var> {
    let diff = g.sub(x, prev)?;
    g.add(prev, g.mul_row(diff, g.param(store, mu))?)
}

fn expect_btd(g: &Graph, x: Var, dim: usize) -> Result<()> {
    let shape = g.shape(x);
    if shape.len() != 3 || shape[1] == 0 || shape[2] != dim {
        return Err(Error::Shape(format!("rwkv expects [B×T×{dim}], got {shape:?}")));
    }
    Ok(())
}

/// RWKV time mixing: token-shifted receptance/key/value projections and the
/// decayed weighted key-value aggregate, gated by `sigmoid(R)`.
#[derive(Debug, Clone)]
pub struct TimeMix {
    pub mu_r: ParamId,
    pub mu_k: ParamId,
    pub mu_v: ParamId,
    pub w_r: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_out: Linear,
    /// Unconstrained decay; the effective per-step decay rate is `exp(w)`.
    pub w: ParamId,
    /// Current-step bonus.
    pub u: ParamId,
    pub dim: usize,
}

impl TimeMix {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            mu_r: store.add(format!("{name}.mu_r"), Tensor::full(&[dim], 0.5))?,
            mu_k: store.add(format!("{name}.mu_k"), Tensor::full(&[dim], 0.5))?,
            mu_v: store.add(format!("{name}.mu_v"), Tensor::full(&[dim], 0.5))?,
            w_r: Linear::new(store, rng, &format!("{name}.w_r"), dim, dim, false)?,
            w_k: Linear::new(store, rng, &format!("{name}.w_k"), dim, dim, false)?,
            w_v: Linear::new(store, rng, &format!("{name}.w_v"), dim, dim, false)?,
            w_out: Linear::new(store, rng, &format!("{name}.w_out"), dim, dim, false)?,
            w: store.add(format!("{name}.w"), Tensor::zeros(&[dim]))?,
            u: store.add(format!("{name}.u"), Tensor::zeros(&[dim]))?,
            dim,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        expect_btd(g, x, self.dim)?;
        let prev = token_shift(g, x)?;
        let r = self.w_r.forward(g, store, interpolate(g, store, x, prev, self.mu_r)?)?;
        let k = self.w_k.forward(g, store, interpolate(g, store, x, prev, self.mu_k)?)?;
        let v = self.w_v.forward(g, store, interpolate(g, store, x, prev, self.mu_v)?)?;
        let wkv = g.wkv(k, v, g.param(store, self.w), g.param(store, self.u))?;
        let gated = g.mul(g.sigmoid(r), wkv)?;
        self.w_out.forward(g, store, gated)
    }
}

/// RWKV channel mixing: `sigmoid(R′) ⊙ W′_v·relu(K′)²`.
#[derive(Debug, Clone)]
pub struct ChannelMix {
    pub mu_r: ParamId,
    pub mu_k: ParamId,
    pub w_r: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub dim: usize,
}

impl ChannelMix {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            mu_r: store.add(format!("{name}.mu_r"), Tensor::full(&[dim], 0.5))?,
            mu_k: store.add(format!("{name}.mu_k"), Tensor::full(&[dim], 0.5))?,
            w_r: Linear::new(store, rng, &format!("{name}.w_r"), dim, dim, false)?,
            w_k: Linear::new(store, rng, &format!("{name}.w_k"), dim, hidden, false)?,
            w_v: Linear::new(store, rng, &format!("{name}.w_v"), hidden, dim, false)?,
            dim,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        expect_btd(g, x, self.dim)?;
        let prev = token_shift(g, x)?;
        let r = self.w_r.forward(g, store, interpolate(g, store, x, prev, self.mu_r)?)?;
        let k = self.w_k.forward(g, store, interpolate(g, store, x, prev, self.mu_k)?)?;
        let v = self.w_v.forward(g, store, g.squared_relu(k))?;
        g.mul(g.sigmoid(r), v)
    }
}

/// Pre-norm residual block: time mixing followed by channel mixing.
#[derive(Debug, Clone)]
pub struct RwkvBlock {
    pub ln1: LayerNorm,
    pub time_mix: TimeMix,
    pub ln2: LayerNorm,
    pub channel_mix: ChannelMix,
}

impl RwkvBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            time_mix: TimeMix::new(store, rng, &format!("{name}.time_mix"), dim)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            channel_mix: ChannelMix::new(store, rng, &format!("{name}.channel_mix"), dim, hidden)?,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.time_mix.forward(g, store, self.ln1.forward(g, store, x)?)?;
        let x = g.add(x, h)?;
        let h = self.channel_mix.forward(g, store, self.ln2.forward(g, store, x)?)?;
        g.add(x, h)
    }
}

/// A stack of RWKV blocks applied independently to every sequence of a batch.
#[derive(Debug, Clone)]
pub struct RwkvStack {
    pub blocks: Vec<RwkvBlock>,
    pub dim: usize,
}

impl RwkvStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        layers: usize,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| RwkvBlock::new(store, rng, &format!("{name}.layer{i}"), dim, hidden))
            .collect::<Result<_>>()?;
        Ok(Self { blocks, dim })
    }

    /// Accepts `[T×D]` or `[B×T×D]` and returns the same shape.
    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let mut h = match shape.len() {
            2 => g.reshape(x, &[1, shape[0], shape[1]])?,
            _ => x,
        };
        for block in &self.blocks {
            h = block.forward(g, store, h)?;
        }
        if shape.len() == 2 {
            h = g.reshape(h, &shape)?;
        }
        Ok(h)
    }
}
