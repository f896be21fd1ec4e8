use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// `y = x·W + b` applied over the last axis; `W` is `[in×out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights uniform in `±1/√in`, bias zero.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], bound, rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let last = shape.last().copied().unwrap_or(0);
        if last != self.in_dim {
            return Err(Error::Shape(format!(
                "linear expects last extent {}, got input {:?}",
                self.in_dim, shape
            )));
        }
        let rows = shape.iter().product::<usize>() / last;
        let flat = g.reshape(x, &[rows, last])?;
        let mut y = g.matmul(flat, g.param(store, self.weight))?;
        if let Some(b) = self.bias {
            y = g.add_row(y, g.param(store, b))?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        g.reshape(y, &out_shape)
    }
}

/// Residual MLP: `x + W₂·relu(W₁·x + b₁) + b₂`.
#[derive(Debug, Clone)]
pub struct FfnBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FfnBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = g.relu(self.fc1.forward(g, store, x)?);
        let y = self.fc2.forward(g, store, h)?;
        g.add(x, y)
    }
}

/// Layer normalization over the last axis with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            scale: store.add(format!("{name}.scale"), Tensor::full(&[dim], 1.0))?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[dim]))?,
            eps: Self::EPS,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, self.eps)?;
        let n = g.mul_row(n, g.param(store, self.scale))?;
        g.add_row(n, g.param(store, self.shift))
    }
}
