//! Run configuration: one JSON file describing data, model, training and
//! strategy. Relative paths resolve against the file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dft_core::backtest::{Benchmark, StrategyConfig};
use dft_core::data::{SplitConfig, DEFAULT_INTERVALS};
use dft_core::model::ModelConfig;
use dft_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// How to read the market CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarketMode {
    /// Index levels; return/mean/std features are derived per interval.
    #[default]
    Indices,
    /// Columns are already the per-day market features.
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub panel: PathBuf,
    pub market: PathBuf,
    #[serde(default)]
    pub market_mode: MarketMode,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_intervals")]
    pub market_intervals: Vec<usize>,
    #[serde(default)]
    pub split: SplitConfig,
}

fn default_horizon() -> usize {
    5
}

fn default_intervals() -> Vec<usize> {
    DEFAULT_INTERVALS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream (init, shuffle).
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub backtest: StrategyConfig,
}

impl RunConfig {
    /// Parses without touching the filesystem. Errors carry the JSON path
    /// of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("config field '{path}': {}", e.into_inner())
        })?;
        // One seed drives every stream; a second one under `train` would be ambiguous.
        let raw: serde_json::Value = serde_json::from_str(text)?;
        if raw.pointer("/train/seed").is_some() {
            bail!("config field 'train.seed': set the top-level 'seed' instead");
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_json(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.panel, &mut cfg.data.market, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks values and that the input files exist.
    pub fn validate(&self) -> Result<()> {
        for (field, p) in [("data.panel", &self.data.panel), ("data.market", &self.data.market)] {
            if !p.is_file() {
                bail!("{field}: no such file {}", p.display());
            }
        }
        if self.data.horizon < 2 {
            bail!("data.horizon: must be at least 2, got {}", self.data.horizon);
        }
        if self.data.market_mode == MarketMode::Indices {
            if self.data.market_intervals.is_empty() || self.data.market_intervals.contains(&0) {
                bail!("data.market_intervals: need at least one positive interval");
            }
        } else if let Benchmark::Index(name) = &self.backtest.benchmark {
            bail!("backtest.benchmark: index '{name}' needs market_mode \"indices\" (levels are required)");
        }
        self.data.split.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.backtest.validate()?;
        Ok(())
    }
}
