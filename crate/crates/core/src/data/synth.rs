//! Synthetic panel with a planted, tunable signal.
//!
//! Recipe, with `ε` draws i.i.d. standard normal and `N = dates + horizon`
//! rows simulated (the extra rows only feed the planted feature):
//!
//! - market factor `m_t = ε`
//! - index `i` log level: `ℓ_{i,t} = ℓ_{i,t−1} + 0.01·(1 + 0.5·i)·m_t + 0.003·ε`, `ℓ_{i,0} = ln(1000·(i+1))`
//! - stock `u`: `β_u ~ U(0.5, 1.5)`, drift `μ_u = 0.0005·ε`, start price `U(20, 200)`
//!   - trend `τ_t = τ_{t−1} + μ_u + 0.01·β_u·m_t + 0.01·ε` (random walk)
//!   - fluctuation `φ_t = 0.8·φ_{t−1} + 0.01·ε` (AR(1))
//!   - close `c_t = c_0·exp(τ_t + φ_t)`
//! - features: `f0 = signal·z_t(r̃) + ε` where `z_t(r̃)` is the population
//!   z-score across stocks of `(c_{t+d} − c_{t+1}) / c_{t+1}`; `f1` is the
//!   trailing one-day log return in percent; the rest are pure noise.
//!
//! Since `z_t(r̃)` is exactly the normalized label, the population
//! correlation of `f0` with the label is `signal / sqrt(signal² + 1)`.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::labels::zscore_cross_section;
use super::market::MarketSeries;
use super::panel::PanelDataset;
use crate::error::{Error, Result};
use crate::seed::sub_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub stocks: usize,
    pub dates: usize,
    pub signal_strength: f64,
    /// Horizon of the planted label, matching `data.horizon`.
    pub horizon: usize,
    pub features: usize,
    pub indices: usize,
    pub start: NaiveDate,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            stocks: 20,
            dates: 300,
            signal_strength: 5.0,
            horizon: 5,
            features: 6,
            indices: 2,
            start: NaiveDate::from_ymd_opt(2020, 1, 2).unwrap(),
        }
    }
}

/// Consecutive weekdays starting at `start` (rolled forward off weekends).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<(PanelDataset, MarketSeries)> {
    if cfg.stocks == 0 || cfg.dates == 0 || cfg.features == 0 || cfg.indices == 0 {
        return Err(Error::Config(
            "synth: stocks, dates, features and indices must be positive".into(),
        ));
    }
    if cfg.horizon < 2 {
        return Err(Error::Config(format!(
            "synth.horizon must be at least 2, got {}",
            cfg.horizon
        )));
    }
    if !cfg.signal_strength.is_finite() {
        return Err(Error::Config("synth.signal_strength must be finite".into()));
    }
    let (s_n, n, h) = (cfg.stocks, cfg.dates, cfg.horizon);
    let total = n + h;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "synth", 0));

    let factor: Vec<f64> = (0..total).map(|_| normal(&mut rng)).collect();
    let mut levels = vec![vec![0.0; cfg.indices]; total];
    for i in 0..cfg.indices {
        let mut log_level = (1000.0 * (i + 1) as f64).ln();
        for (t, row) in levels.iter_mut().enumerate() {
            if t > 0 {
                log_level += 0.01 * (1.0 + 0.5 * i as f64) * factor[t] + 0.003 * normal(&mut rng);
            }
            row[i] = log_level.exp();
        }
    }

    // closes[u][t]
    let mut closes = vec![vec![0.0; total]; s_n];
    for path in closes.iter_mut() {
        let beta = rng.random_range(0.5..1.5);
        let drift = 0.0005 * normal(&mut rng);
        let start = rng.random_range(20.0..200.0);
        let (mut trend, mut fluct) = (0.0, 0.0);
        for (t, c) in path.iter_mut().enumerate() {
            if t > 0 {
                trend += drift + 0.01 * beta * factor[t] + 0.01 * normal(&mut rng);
                fluct = 0.8 * fluct + 0.01 * normal(&mut rng);
            }
            *c = start * f64::exp(trend + fluct);
        }
    }

    let mut features = Vec::with_capacity(n * s_n);
    let mut close_cells = Vec::with_capacity(n * s_n);
    for t in 0..n {
        let raw: Vec<f64> = (0..s_n)
            .map(|u| (closes[u][t + h] - closes[u][t + 1]) / closes[u][t + 1])
            .collect();
        let planted = zscore_cross_section(&raw).unwrap_or_else(|_| vec![0.0; s_n]);
        for u in 0..s_n {
            let mut f = Vec::with_capacity(cfg.features);
            f.push(cfg.signal_strength * planted[u] + normal(&mut rng));
            if cfg.features > 1 {
                let lagged = if t == 0 {
                    0.0
                } else {
                    100.0 * (closes[u][t] / closes[u][t - 1]).ln()
                };
                f.push(lagged);
            }
            while f.len() < cfg.features {
                f.push(normal(&mut rng));
            }
            features.push(Some(f));
            close_cells.push(Some(closes[u][t]));
        }
    }

    let dates = business_days(cfg.start, n);
    let symbols = (0..s_n).map(|u| format!("S{u:03}")).collect();
    let names = (0..cfg.features).map(|i| format!("f{i}")).collect();
    let panel = PanelDataset::new(dates.clone(), symbols, names, features, close_cells)?;
    levels.truncate(n);
    let market = MarketSeries::new(dates, (0..cfg.indices).map(|i| format!("idx{i}")).collect(), levels)?;
    Ok((panel, market))
}
