//! Daily cross-sectional IC / RankIC and their information ratios.

use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::DATE_FORMAT;
use crate::error::{Error, Result};
use crate::stats::{mean, population_std, ratio_or_sentinel, sentinel};

/// Pearson correlation; `None` when fewer than two points or either side
/// has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "pearson: length mismatch");
    if x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    // sqrt(fl(a·a)) == a exactly, so a series against itself gives exactly 1.
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DailyScores {
    pub date: NaiveDate,
    pub symbols: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyMetric {
    pub date: NaiveDate,
    pub ic: f64,
    pub rank_ic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ic: f64,
    #[serde(with = "sentinel")]
    pub icir: f64,
    pub rank_ic: f64,
    #[serde(with = "sentinel")]
    pub rank_icir: f64,
    pub n_days: usize,
    /// Days left out because a correlation was undefined.
    pub dropped_days: usize,
    #[serde(skip)]
    pub daily: Vec<DailyMetric>,
}

/// Averages daily correlations. A day is kept only when both its Pearson
/// and Spearman correlations are defined. ICIR uses the population std of
/// the daily series; a zero std yields a signed infinite sentinel.
pub fn aggregate(days: &[DailyScores]) -> Result<MetricsReport> {
    let mut daily = Vec::with_capacity(days.len());
    for d in days {
        if d.scores.len() != d.labels.len() || d.symbols.len() != d.scores.len() {
            return Err(Error::Shape(format!(
                "{}: scores, labels and symbols differ in length",
                d.date
            )));
        }
        if d.scores.iter().chain(&d.labels).any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("{}: NaN score or label", d.date)));
        }
        match (pearson(&d.scores, &d.labels), spearman(&d.scores, &d.labels)) {
            (Some(ic), Some(rank_ic)) => daily.push(DailyMetric {
                date: d.date,
                ic,
                rank_ic,
            }),
            _ => log::debug!("{}: degenerate cross-section, day dropped", d.date),
        }
    }
    let dropped_days = days.len() - daily.len();
    if daily.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 days with defined correlations, got {} ({dropped_days} dropped)",
            daily.len()
        )));
    }
    let ics: Vec<f64> = daily.iter().map(|d| d.ic).collect();
    let rics: Vec<f64> = daily.iter().map(|d| d.rank_ic).collect();
    let (ic, rank_ic) = (mean(&ics), mean(&rics));
    let icir = ratio_or_sentinel(ic, population_std(&ics));
    let rank_icir = ratio_or_sentinel(rank_ic, population_std(&rics));
    if icir.is_infinite() || rank_icir.is_infinite() {
        log::warn!("daily correlation series has zero variance; ratio reported as infinite");
    }
    Ok(MetricsReport {
        ic,
        icir,
        rank_ic,
        rank_icir,
        n_days: daily.len(),
        dropped_days,
        daily,
    })
}

pub fn write_report_json(report: &MetricsReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `date,ic,rank_ic` with shortest round-trip formatting, so the ratios can
/// be recomputed exactly from the file.
pub fn write_daily_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "ic", "rank_ic"])?;
    for d in &report.daily {
        w.write_record([
            d.date.format(DATE_FORMAT).to_string(),
            d.ic.to_string(),
            d.rank_ic.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_daily_csv(path: &Path) -> Result<Vec<DailyMetric>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = || Error::Data(format!("{}: malformed daily metrics row", path.display()));
        out.push(DailyMetric {
            date: NaiveDate::parse_from_str(rec.get(0).ok_or_else(bad)?, DATE_FORMAT).map_err(|_| bad())?,
            ic: rec.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?,
            rank_ic: rec.get(2).ok_or_else(bad)?.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
