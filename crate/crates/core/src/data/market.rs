use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;

use super::panel::{format_sig12, DATE_FORMAT};
use crate::error::{Error, Result};
use crate::stats::{mean, population_std};

pub const DEFAULT_INTERVALS: [usize; 5] = [5, 10, 20, 30, 60];

/// Index levels on a date axis, `levels[t][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSeries {
    pub dates: Vec<NaiveDate>,
    pub names: Vec<String>,
    pub levels: Vec<Vec<f64>>,
}

impl MarketSeries {
    pub fn new(dates: Vec<NaiveDate>, names: Vec<String>, levels: Vec<Vec<f64>>) -> Result<Self> {
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("market dates must be strictly increasing".into()));
        }
        if levels.len() != dates.len() {
            return Err(Error::Shape(format!(
                "{} market dates but {} rows",
                dates.len(),
                levels.len()
            )));
        }
        for (t, row) in levels.iter().enumerate() {
            if row.len() != names.len() {
                return Err(Error::Shape(format!(
                    "market row {} has {} values, expected {}",
                    dates[t],
                    row.len(),
                    names.len()
                )));
            }
        }
        Ok(Self { dates, names, levels })
    }

    /// Restricts the series to `dates`, which must all be present.
    pub fn align(&self, dates: &[NaiveDate]) -> Result<Self> {
        let levels = dates
            .iter()
            .map(|d| {
                self.dates
                    .binary_search(d)
                    .map(|i| self.levels[i].clone())
                    .map_err(|_| Error::Data(format!("market series has no row for {d}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dates.to_vec(), self.names.clone(), levels)
    }
}

/// Reads `date,name0,name1,...`. With `positive` set, values are index
/// levels and must be positive.
pub fn load_market_csv(path: &Path, positive: bool) -> Result<MarketSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("date") || headers.len() < 2 {
        return Err(Error::Data(format!(
            "{}: expected header 'date,<column>,...'",
            path.display()
        )));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut rows = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let raw = record.get(0).unwrap_or("");
        let date = NaiveDate::parse_from_str(raw, DATE_FORMAT)
            .map_err(|_| Error::Data(format!("{}: row {line}: cannot parse date '{raw}'", path.display())))?;
        let mut values = Vec::with_capacity(names.len());
        for (k, name) in names.iter().enumerate() {
            let cell = record.get(k + 1).unwrap_or("");
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() && (!positive || v > 0.0) => values.push(v),
                _ => {
                    return Err(Error::Data(format!(
                        "{}: row {line}: column '{name}': invalid value '{cell}'",
                        path.display()
                    )))
                }
            }
        }
        if rows.insert(date, values).is_some() {
            return Err(Error::Data(format!(
                "{}: row {line}: duplicate date {date}",
                path.display()
            )));
        }
    }
    let (dates, levels) = rows.into_iter().unzip();
    MarketSeries::new(dates, names, levels)
}

pub fn write_market_csv(ms: &MarketSeries, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string()];
    header.extend(ms.names.iter().cloned());
    w.write_record(&header)?;
    for (d, row) in ms.dates.iter().zip(&ms.levels) {
        let mut rec = vec![d.format(DATE_FORMAT).to_string()];
        rec.extend(row.iter().map(|&v| format_sig12(v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-date market feature vectors; `None` where history is too short.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketFeatures {
    pub dates: Vec<NaiveDate>,
    pub names: Vec<String>,
    pub values: Vec<Option<Vec<f64>>>,
}

impl MarketFeatures {
    /// Uses the series values directly as features.
    pub fn precomputed(ms: &MarketSeries) -> Self {
        Self {
            dates: ms.dates.clone(),
            names: ms.names.clone(),
            values: ms.levels.iter().cloned().map(Some).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }
}

/// For each index and each interval `d′`: the trailing `d′`-day return
/// `L_t / L_{t−d′} − 1`, and the mean and population std of the last `d′`
/// one-day returns. Features are ordered index-major, then by interval,
/// then (return, mean, std). Dates with fewer than `max d′` prior rows are
/// `None`.
pub fn build_market_features(ms: &MarketSeries, intervals: &[usize]) -> Result<MarketFeatures> {
    if intervals.is_empty() || intervals.contains(&0) {
        return Err(Error::Config(format!(
            "market intervals must be positive, got {intervals:?}"
        )));
    }
    if ms.levels.iter().flatten().any(|&v| !(v > 0.0)) {
        return Err(Error::Data("market index levels must be positive".into()));
    }
    let warmup = *intervals.iter().max().unwrap();
    let mut names = Vec::new();
    for idx in &ms.names {
        for d in intervals {
            for stat in ["ret", "mean", "std"] {
                names.push(format!("{idx}.{stat}{d}"));
            }
        }
    }
    let values = (0..ms.dates.len())
        .map(|t| {
            if t < warmup {
                return None;
            }
            let mut f = Vec::with_capacity(names.len());
            for i in 0..ms.names.len() {
                let level = |s: usize| ms.levels[s][i];
                for &d in intervals {
                    let daily: Vec<f64> = (t + 1 - d..=t).map(|s| level(s) / level(s - 1) - 1.0).collect();
                    f.push(level(t) / level(t - d) - 1.0);
                    f.push(mean(&daily));
                    f.push(population_std(&daily));
                }
            }
            Some(f)
        })
        .collect();
    Ok(MarketFeatures {
        dates: ms.dates.clone(),
        names,
        values,
    })
}
