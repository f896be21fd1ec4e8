//! The dual-branch network.
//!
//! Embedded stock windows are split into a trend part (moving average plus
//! a learned RWKV correction) and a fluctuation residual. Each part goes
//! through its own pair of time-correlation (RWKV over steps) and
//! stock-correlation (attention over stocks) stages, is fused with a
//! market embedding, and is aggregated over time with attention queried by
//! the last step before a linear predictor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{FfnBlock, Linear, MultiHeadAttention, RwkvStack};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Order of the two correlation stages inside a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationOrder {
    /// Time correlation first, then stock correlation.
    TcThenSc,
    /// Stock correlation first, then time correlation.
    ScThenTc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Raw per-stock feature count.
    pub features: usize,
    /// Embedding width.
    pub dim: usize,
    /// Lookback window length.
    pub lookback: usize,
    /// Attention heads in the stock-correlation stages.
    pub heads: usize,
    /// Moving-average window of the decomposition (odd).
    pub pool_kernel: usize,
    /// Kernel and stride of the market convolution.
    pub market_kernel: usize,
    /// Market features per day.
    pub market_features: usize,
    /// RWKV blocks per time-correlation stage.
    pub tc_layers: usize,
    pub fluct_order: CorrelationOrder,
    pub trend_order: CorrelationOrder,
    /// Hidden width of the residual FFNs; defaults to `2·dim`.
    pub ffn_hidden: Option<usize>,
    /// Hidden width of RWKV channel mixing; defaults to `4·dim`.
    pub channel_hidden: Option<usize>,
    /// Output channels of the market convolution; defaults to `dim`.
    pub market_channels: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: 6,
            dim: 32,
            lookback: 8,
            heads: 4,
            pool_kernel: 5,
            market_kernel: 2,
            market_features: 30,
            tc_layers: 1,
            fluct_order: CorrelationOrder::TcThenSc,
            trend_order: CorrelationOrder::ScThenTc,
            ffn_hidden: None,
            channel_hidden: None,
            market_channels: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("model.{field}: {msg}")));
        if self.features == 0 {
            return bad("features", "must be positive".into());
        }
        if self.dim == 0 {
            return bad("dim", "must be positive".into());
        }
        if self.lookback == 0 {
            return bad("lookback", "must be at least 1".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("heads", format!("{} does not divide dim {}", self.heads, self.dim));
        }
        if self.pool_kernel.is_multiple_of(2) {
            return bad("pool_kernel", format!("must be odd, got {}", self.pool_kernel));
        }
        if self.market_kernel == 0 {
            return bad("market_kernel", "must be positive".into());
        }
        if self.market_features == 0 {
            return bad("market_features", "must be positive".into());
        }
        for (field, v) in [
            ("ffn_hidden", self.ffn_hidden),
            ("channel_hidden", self.channel_hidden),
            ("market_channels", self.market_channels),
        ] {
            if v == Some(0) {
                return bad(field, "must be positive".into());
            }
        }
        Ok(())
    }

    /// Market rows consumed per sample: `lookback · market_kernel`.
    pub fn market_rows(&self) -> usize {
        self.lookback * self.market_kernel
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(2 * self.dim)
    }

    pub fn channel_hidden(&self) -> usize {
        self.channel_hidden.unwrap_or(4 * self.dim)
    }

    pub fn market_channels(&self) -> usize {
        self.market_channels.unwrap_or(self.dim)
    }
}

/// Attention across stocks at each time step, then a residual FFN:
/// `FFN(MHA(H) + H)`.
#[derive(Debug, Clone)]
pub struct StockCorrelation {
    pub attn: MultiHeadAttention,
    pub ffn: FfnBlock,
}

impl StockCorrelation {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), cfg.dim, cfg.heads)?,
            ffn: FfnBlock::new(store, rng, &format!("{name}.ffn"), cfg.dim, cfg.ffn_hidden())?,
        })
    }

    /// `x` is `[S×T×D]`.
    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let by_time = g.permute(x, &[1, 0, 2])?;
        let mixed = self.attn.forward(g, store, by_time)?;
        let z = self.ffn.forward(g, store, g.add(mixed, by_time)?)?;
        g.permute(z, &[1, 0, 2])
    }
}

/// One branch: a time-correlation and a stock-correlation stage in a fixed order.
#[derive(Debug, Clone)]
pub struct Branch {
    pub tc: RwkvStack,
    pub sc: StockCorrelation,
    pub order: CorrelationOrder,
}

impl Branch {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &ModelConfig,
        order: CorrelationOrder,
    ) -> Result<Self> {
        Ok(Self {
            tc: RwkvStack::new(
                store,
                rng,
                &format!("{name}.tc"),
                cfg.dim,
                cfg.channel_hidden(),
                cfg.tc_layers,
            )?,
            sc: StockCorrelation::new(store, rng, &format!("{name}.sc"), cfg)?,
            order,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self.order {
            CorrelationOrder::TcThenSc => {
                let h = self.tc.forward(g, store, x)?;
                self.sc.forward(g, store, h)
            }
            CorrelationOrder::ScThenTc => {
                let h = self.sc.forward(g, store, x)?;
                self.tc.forward(g, store, h)
            }
        }
    }
}

/// Variables produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[S]` predicted normalized returns.
    pub predictions: Var,
    /// `[S×T]` temporal aggregation weights.
    pub lambda: Var,
    pub embedded: Var,
    pub trend: Var,
    pub fluct: Var,
    pub z_trend: Var,
    pub z_fluct: Var,
    /// `[T×D]` market embedding before broadcasting over stocks.
    pub z_market: Var,
    pub fused: Var,
    /// `[S×D]` time-aggregated stock representations.
    pub aggregated: Var,
}

#[derive(Debug, Clone)]
pub struct DftModel {
    pub config: ModelConfig,
    pub embed: Linear,
    pub decomp_tc: RwkvStack,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub fluct: Branch,
    pub trend: Branch,
    pub market_conv_weight: ParamId,
    pub market_conv_bias: ParamId,
    pub market_linear: Linear,
    pub fuse: FfnBlock,
    pub w_lambda: ParamId,
    pub predictor: Linear,
}

impl DftModel {
    /// Builds the model and registers its parameters in a fresh store.
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let cfg = config;
        let d = cfg.dim;
        let mut store = ParamStore::new();
        let s = &mut store;
        let embed = Linear::new(s, rng, "embed", cfg.features, d, true)?;
        let decomp_tc = RwkvStack::new(s, rng, "decomp.tc", d, cfg.channel_hidden(), cfg.tc_layers)?;
        let alpha = s.add("decomp.alpha", Tensor::new(&[1], vec![1.0])?)?;
        let beta = s.add("decomp.beta", Tensor::new(&[1], vec![0.0])?)?;
        let fluct = Branch::new(s, rng, "fluct", cfg, cfg.fluct_order)?;
        let trend = Branch::new(s, rng, "trend", cfg, cfg.trend_order)?;
        let conv_in = cfg.market_kernel * cfg.market_features;
        let market_conv_weight = s.add_uniform(
            "market.conv.weight",
            &[conv_in, cfg.market_channels()],
            1.0 / (conv_in as f64).sqrt(),
            rng,
        )?;
        let market_conv_bias = s.add("market.conv.bias", Tensor::zeros(&[cfg.market_channels()]))?;
        let market_linear = Linear::new(s, rng, "market.linear", cfg.market_channels(), d, true)?;
        let fuse = FfnBlock::new(s, rng, "fuse.ffn", d, cfg.ffn_hidden())?;
        let w_lambda = s.add_uniform("agg.w_lambda", &[d, d], 1.0 / (d as f64).sqrt(), rng)?;
        let predictor = Linear::new(s, rng, "predictor", d, 1, true)?;
        let model = Self {
            config: cfg.clone(),
            embed,
            decomp_tc,
            alpha,
            beta,
            fluct,
            trend,
            market_conv_weight,
            market_conv_bias,
            market_linear,
            fuse,
            w_lambda,
            predictor,
        };
        Ok((model, store))
    }

    /// Per-(stock, step) linear embedding `[S×T×F] → [S×T×D]`.
    pub fn embed(&self, g: &Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let shape = g.shape(features);
        if shape.len() != 3 || shape[1] != self.config.lookback || shape[2] != self.config.features {
            return Err(Error::Shape(format!(
                "features must be [S×{}×{}], got {shape:?}",
                self.config.lookback, self.config.features
            )));
        }
        self.embed.forward(g, store, features)
    }

    /// Returns `(trend, fluct)` with `trend = α·AvgPool(X) + β·TC(X)` and
    /// `fluct = X − trend`.
    pub fn decompose(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let pooled = g.avg_pool1d_replicate(x, self.config.pool_kernel)?;
        let learned = self.decomp_tc.forward(g, store, x)?;
        let trend = g.add(
            g.mul_scalar(pooled, g.param(store, self.alpha))?,
            g.mul_scalar(learned, g.param(store, self.beta))?,
        )?;
        let fluct = g.sub(x, trend)?;
        Ok((trend, fluct))
    }

    pub fn fluctuation_branch(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.fluct.forward(g, store, x)
    }

    pub fn trend_branch(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.trend.forward(g, store, x)
    }

    /// Strided convolution over `[(T·k_c)×M]` market history, then a linear
    /// map to `[T×D]`.
    pub fn market_encode(&self, g: &Graph, store: &ParamStore, market: Var) -> Result<Var> {
        let shape = g.shape(market);
        let rows = self.config.market_rows();
        if shape.len() != 2 || shape[0] != rows || shape[1] != self.config.market_features {
            return Err(Error::Data(format!(
                "market window must be [{rows}×{}] (lookback·market_kernel rows), got {shape:?}",
                self.config.market_features
            )));
        }
        let conv = g.conv1d_strided(
            market,
            g.param(store, self.market_conv_weight),
            Some(g.param(store, self.market_conv_bias)),
            self.config.market_kernel,
        )?;
        self.market_linear.forward(g, store, conv)
    }

    /// `Z = FFN(Z_t + Z_f + Z_m)`, then softmax-over-time weights queried by
    /// the last step: `λ_{u,t} ∝ exp(z_{u,t}ᵀ W_λ z_{u,T})`.
    /// Returns `(fused [S×T×D], aggregated [S×D], λ [S×T])`.
    pub fn fuse_and_aggregate(
        &self,
        g: &Graph,
        store: &ParamStore,
        z_trend: Var,
        z_fluct: Var,
        z_market: Var,
    ) -> Result<(Var, Var, Var)> {
        let shape = g.shape(z_trend);
        let (s, t, d) = (shape[0], shape[1], shape[2]);
        let market = g.broadcast_leading(z_market, s)?;
        let sum = g.add(g.add(z_trend, z_fluct)?, market)?;
        let fused = self.fuse.forward(g, store, sum)?;

        let query = g.slice(fused, 1, t - 1, 1)?;
        let flat = g.reshape(fused, &[s * t, d])?;
        let projected = g.reshape(g.matmul(flat, g.param(store, self.w_lambda))?, &[s, t, d])?;
        let logits = g.bmm(projected, g.transpose(query)?)?;
        let lambda = g.softmax(g.reshape(logits, &[s, t])?, 1)?;
        let agg = g.bmm(g.reshape(lambda, &[s, 1, t])?, fused)?;
        Ok((fused, g.reshape(agg, &[s, d])?, lambda))
    }

    pub fn predict(&self, g: &Graph, store: &ParamStore, aggregated: Var) -> Result<Var> {
        let s = g.shape(aggregated)[0];
        let out = self.predictor.forward(g, store, aggregated)?;
        g.reshape(out, &[s])
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, features: &Tensor, market: &Tensor) -> Result<ForwardOutput> {
        if features.ndim() != 3 || features.shape()[0] == 0 {
            return Err(Error::Data(format!(
                "need at least one stock, got features of shape {:?}",
                features.shape()
            )));
        }
        let embedded = self.embed(g, store, g.constant(features.clone()))?;
        let z_market = self.market_encode(g, store, g.constant(market.clone()))?;
        let (trend, fluct) = self.decompose(g, store, embedded)?;
        let z_fluct = self.fluctuation_branch(g, store, fluct)?;
        let z_trend = self.trend_branch(g, store, trend)?;
        let (fused, aggregated, lambda) = self.fuse_and_aggregate(g, store, z_trend, z_fluct, z_market)?;
        let predictions = self.predict(g, store, aggregated)?;
        Ok(ForwardOutput {
            predictions,
            lambda,
            embedded,
            trend,
            fluct,
            z_trend,
            z_fluct,
            z_market,
            fused,
            aggregated,
        })
    }

    /// Convenience inference pass returning plain predictions.
    pub fn predict_values(&self, store: &ParamStore, features: &Tensor, market: &Tensor) -> Result<Vec<f64>> {
        let g = Graph::new();
        let out = self.forward(&g, store, features, market)?;
        Ok(g.value(out.predictions).data().to_vec())
    }
}

/// Mean squared error over the stocks of one day.
pub fn mse_loss(g: &Graph, predictions: Var, labels: &[f64]) -> Result<Var> {
    let shape = g.shape(predictions);
    if shape != [labels.len()] || labels.is_empty() {
        return Err(Error::Shape(format!(
            "loss: predictions {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let target = g.constant(Tensor::new(&[labels.len()], labels.to_vec())?);
    let diff = g.sub(predictions, target)?;
    Ok(g.mean_all(g.mul(diff, diff)?))
}
