//! Daily-rebalanced top-k portfolio simulation.
//!
//! Each day the portfolio holds the `top_k` highest-scoring symbols
//! (ties broken by ascending symbol), equally weighted. Turnover is
//! `½·Σ|w_new − w_old|`; the first day has no prior book and counts as
//! zero. Trading cost is `turnover · bps / 10⁴`. A held symbol without a
//! realised return contributes 0.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::DATE_FORMAT;
use crate::error::{Error, Result};
use crate::stats::{mean, population_std, ratio_or_sentinel, sentinel};

pub const TRADING_DAYS: f64 = 252.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    /// Mean next-day return of every symbol scored that day.
    EqualWeight,
    /// Next-day return of the named market index.
    Index(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub top_k: usize,
    pub transaction_cost_bps: f64,
    pub benchmark: Benchmark,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            top_k: 30,
            transaction_cost_bps: 0.0,
            benchmark: Benchmark::EqualWeight,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("backtest.top_k must be at least 1".into()));
        }
        if !(self.transaction_cost_bps >= 0.0 && self.transaction_cost_bps.is_finite()) {
            return Err(Error::Config(
                "backtest.transaction_cost_bps must be a non-negative number".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestDay {
    pub date: NaiveDate,
    pub symbols: Vec<String>,
    pub scores: Vec<f64>,
    /// Next-day simple returns, aligned with `symbols`.
    pub returns: Vec<Option<f64>>,
    /// Required when the benchmark is an index.
    pub benchmark_return: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub dates: Vec<NaiveDate>,
    pub holdings: Vec<Vec<String>>,
    pub portfolio_returns: Vec<f64>,
    pub benchmark_returns: Vec<f64>,
    pub excess_returns: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub benchmark_cumulative: Vec<f64>,
    pub turnover: Vec<f64>,
    pub ar: f64,
    pub ir: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestSummary {
    pub ar: f64,
    #[serde(with = "sentinel")]
    pub ir: f64,
    pub n_days: usize,
    pub mean_turnover: f64,
    pub final_cumulative: f64,
    pub final_benchmark_cumulative: f64,
}

/// Indices of the `k` best scores, ties by symbol.
pub fn select_top_k(symbols: &[String], scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| symbols[a].cmp(&symbols[b]))
    });
    order.truncate(k);
    order
}

/// `mean · 252`.
pub fn annualized_return(excess: &[f64]) -> f64 {
    if excess.is_empty() {
        return 0.0;
    }
    mean(excess) * TRADING_DAYS
}

/// `(mean · 252) / (population std · √252)`; signed infinity when the std is 0.
pub fn information_ratio(excess: &[f64]) -> f64 {
    if excess.is_empty() {
        return 0.0;
    }
    let ir = ratio_or_sentinel(
        mean(excess) * TRADING_DAYS,
        population_std(excess) * TRADING_DAYS.sqrt(),
    );
    if ir.is_infinite() {
        log::warn!("excess returns have zero variance; IR reported as infinite");
    }
    ir
}

fn compound(returns: &[f64]) -> Vec<f64> {
    let mut wealth = 1.0;
    returns
        .iter()
        .map(|r| {
            wealth *= 1.0 + r;
            wealth - 1.0
        })
        .collect()
}

pub fn run_topk_dropk(days: &[BacktestDay], cfg: &StrategyConfig) -> Result<BacktestReport> {
    cfg.validate()?;
    if days.is_empty() {
        return Err(Error::Data("backtest needs at least one day".into()));
    }
    if days.windows(2).any(|w| w[0].date >= w[1].date) {
        return Err(Error::Data(
            "backtest days must be in strictly increasing date order".into(),
        ));
    }
    let mut report = BacktestReport {
        dates: Vec::new(),
        holdings: Vec::new(),
        portfolio_returns: Vec::new(),
        benchmark_returns: Vec::new(),
        excess_returns: Vec::new(),
        cumulative: Vec::new(),
        benchmark_cumulative: Vec::new(),
        turnover: Vec::new(),
        ar: 0.0,
        ir: 0.0,
    };
    let mut book: BTreeMap<String, f64> = BTreeMap::new();
    for (i, day) in days.iter().enumerate() {
        let n = day.symbols.len();
        if day.scores.len() != n || day.returns.len() != n {
            return Err(Error::Shape(format!(
                "{}: symbols, scores and returns differ in length",
                day.date
            )));
        }
        if n == 0 {
            return Err(Error::Data(format!("{}: no symbols to trade", day.date)));
        }
        if n < cfg.top_k {
            log::info!("{}: only {n} symbols, holding all", day.date);
        }
        let held = select_top_k(&day.symbols, &day.scores, cfg.top_k);
        let w = 1.0 / held.len() as f64;
        let next: BTreeMap<String, f64> = held.iter().map(|&j| (day.symbols[j].clone(), w)).collect();

        let turnover = if i == 0 {
            0.0
        } else {
            let mut change = 0.0;
            for (sym, old) in &book {
                change += (next.get(sym).copied().unwrap_or(0.0) - old).abs();
            }
            for (sym, new) in &next {
                if !book.contains_key(sym) {
                    change += new;
                }
            }
            0.5 * change
        };
        let held_returns: Vec<f64> = held
            .iter()
            .map(|&j| {
                day.returns[j].unwrap_or_else(|| {
                    log::info!("{}: no next-day return for {}, counted as 0", day.date, day.symbols[j]);
                    0.0
                })
            })
            .collect();
        let gross = mean(&held_returns);
        let portfolio = gross - turnover * cfg.transaction_cost_bps / 1e4;
        let benchmark = match &cfg.benchmark {
            Benchmark::EqualWeight => mean(&day.returns.iter().map(|r| r.unwrap_or(0.0)).collect::<Vec<_>>()),
            Benchmark::Index(name) => day
                .benchmark_return
                .ok_or_else(|| Error::Data(format!("{}: no return for benchmark index '{name}'", day.date)))?,
        };
        report.dates.push(day.date);
        report.holdings.push(next.keys().cloned().collect());
        report.portfolio_returns.push(portfolio);
        report.benchmark_returns.push(benchmark);
        report.excess_returns.push(portfolio - benchmark);
        report.turnover.push(turnover);
        book = next;
    }
    report.cumulative = compound(&report.portfolio_returns);
    report.benchmark_cumulative = compound(&report.benchmark_returns);
    report.ar = annualized_return(&report.excess_returns);
    report.ir = information_ratio(&report.excess_returns);
    Ok(report)
}

impl BacktestReport {
    pub fn summary(&self) -> BacktestSummary {
        BacktestSummary {
            ar: self.ar,
            ir: self.ir,
            n_days: self.dates.len(),
            mean_turnover: mean(&self.turnover),
            final_cumulative: *self.cumulative.last().unwrap_or(&0.0),
            final_benchmark_cumulative: *self.benchmark_cumulative.last().unwrap_or(&0.0),
        }
    }
}

/// `date,portfolio_return,excess_return,cumulative,benchmark_cumulative`,
/// shortest round-trip number formatting.
pub fn export_curves(report: &BacktestReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "date",
        "portfolio_return",
        "excess_return",
        "cumulative",
        "benchmark_cumulative",
    ])?;
    for i in 0..report.dates.len() {
        w.write_record([
            report.dates[i].format(DATE_FORMAT).to_string(),
            report.portfolio_returns[i].to_string(),
            report.excess_returns[i].to_string(),
            report.cumulative[i].to_string(),
            report.benchmark_cumulative[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary_json(report: &BacktestReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&report.summary())? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
