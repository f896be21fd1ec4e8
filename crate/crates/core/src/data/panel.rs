use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::NaiveDate;

use super::features::{builtin_feature_names, builtin_features, Bar};
use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// Stock panel on a shared trading-day axis. Cells are indexed by
/// `(date index, symbol index)`; either part of a cell may be absent.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    dates: Vec<NaiveDate>,
    symbols: Vec<String>,
    feature_names: Vec<String>,
    features: Vec<Option<Vec<f64>>>,
    closes: Vec<Option<f64>>,
}

impl PanelDataset {
    /// `features` and `closes` are date-major, `dates.len() × symbols.len()`.
    pub fn new(
        dates: Vec<NaiveDate>,
        symbols: Vec<String>,
        feature_names: Vec<String>,
        features: Vec<Option<Vec<f64>>>,
        closes: Vec<Option<f64>>,
    ) -> Result<Self> {
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("dates must be strictly increasing".into()));
        }
        if symbols.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("symbols must be unique and sorted".into()));
        }
        let cells = dates.len() * symbols.len();
        if features.len() != cells || closes.len() != cells {
            return Err(Error::Shape(format!(
                "panel of {} dates × {} symbols needs {cells} cells, got {} feature and {} close cells",
                dates.len(),
                symbols.len(),
                features.len(),
                closes.len()
            )));
        }
        let ds = Self {
            dates,
            symbols,
            feature_names,
            features,
            closes,
        };
        for t in 0..ds.n_dates() {
            for s in 0..ds.n_symbols() {
                ds.check_cell(t, s)?;
            }
        }
        Ok(ds)
    }

    fn check_cell(&self, t: usize, s: usize) -> Result<()> {
        let i = t * self.symbols.len() + s;
        if let Some(c) = self.closes[i] {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Data(format!(
                    "close for {} on {} must be positive, got {c}",
                    self.symbols[s], self.dates[t]
                )));
            }
        }
        if let Some(f) = &self.features[i] {
            if f.len() != self.feature_names.len() {
                return Err(Error::Shape(format!(
                    "features for {} on {}: expected {}, got {}",
                    self.symbols[s],
                    self.dates[t],
                    self.feature_names.len(),
                    f.len()
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "non-finite feature for {} on {}",
                    self.symbols[s], self.dates[t]
                )));
            }
        }
        Ok(())
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_symbols(&self) -> usize {
        self.symbols.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn close(&self, t: usize, s: usize) -> Option<f64> {
        self.closes[t * self.symbols.len() + s]
    }

    pub fn features(&self, t: usize, s: usize) -> Option<&[f64]> {
        self.features[t * self.symbols.len() + s].as_deref()
    }

    pub fn set_close(&mut self, t: usize, s: usize, close: Option<f64>) -> Result<()> {
        let i = t * self.symbols.len() + s;
        let old = std::mem::replace(&mut self.closes[i], close);
        self.check_cell(t, s).inspect_err(|_| self.closes[i] = old)
    }

    pub fn set_features(&mut self, t: usize, s: usize, features: Option<Vec<f64>>) -> Result<()> {
        let i = t * self.symbols.len() + s;
        let old = std::mem::replace(&mut self.features[i], features);
        self.check_cell(t, s).inspect_err(|_| self.features[i] = old.clone())
    }

    /// Number of present `(date, symbol)` rows.
    pub fn row_count(&self) -> usize {
        self.closes
            .iter()
            .zip(&self.features)
            .filter(|(c, f)| c.is_some() || f.is_some())
            .count()
    }
}

const OHLCV: [&str; 7] = ["date", "symbol", "open", "high", "low", "close", "volume"];

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h == name)
}

fn parse_date(raw: &str, line: u64, path: &Path) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(raw, DATE_FORMAT).map_err(|_| {
        Error::Data(format!(
            "{}: row {line}: cannot parse date '{raw}' (expected YYYY-MM-DD)",
            path.display()
        ))
    })
}

fn parse_number(raw: &str, col: &str, line: u64, path: &Path) -> Result<f64> {
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Data(format!(
            "{}: row {line}: column '{col}': cannot parse '{raw}' as a finite number",
            path.display()
        ))),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

/// Collects rows keyed by `(date, symbol)`, rejecting duplicates.
struct RowSet<T> {
    rows: BTreeMap<(NaiveDate, String), T>,
    first_line: BTreeMap<(NaiveDate, String), u64>,
}

impl<T> RowSet<T> {
    fn new() -> Self {
        Self {
            rows: BTreeMap::new(),
            first_line: BTreeMap::new(),
        }
    }

    fn insert(&mut self, date: NaiveDate, symbol: String, value: T, line: u64, path: &Path) -> Result<()> {
        let key = (date, symbol);
        if let Some(prev) = self.first_line.get(&key) {
            return Err(Error::Data(format!(
                "{}: row {line}: duplicate ({}, {}) first seen at row {prev}",
                path.display(),
                key.0,
                key.1
            )));
        }
        self.first_line.insert(key.clone(), line);
        self.rows.insert(key, value);
        Ok(())
    }

    fn axes(&self) -> (Vec<NaiveDate>, Vec<String>) {
        let dates: BTreeSet<_> = self.rows.keys().map(|(d, _)| *d).collect();
        let symbols: BTreeSet<_> = self.rows.keys().map(|(_, s)| s.clone()).collect();
        (dates.into_iter().collect(), symbols.into_iter().collect())
    }
}

/// Reads either an OHLCV panel (builtin features are derived from it) or a
/// precomputed-feature panel `date,symbol,close,f0,...`.
pub fn load_panel_csv(path: &Path) -> Result<PanelDataset> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers()?.clone();
    let has = |n: &str| column(&headers, n).is_some();
    if ["open", "high", "low", "volume"].iter().any(|c| has(c)) {
        let missing: Vec<_> = OHLCV.iter().filter(|c| !has(c)).collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!(
                "{}: missing required columns {missing:?}",
                path.display()
            )));
        }
        load_ohlcv(path, reader, &headers)
    } else {
        load_precomputed(path, reader, &headers)
    }
}

fn load_ohlcv(
    path: &Path,
    mut reader: csv::Reader<std::fs::File>,
    headers: &csv::StringRecord,
) -> Result<PanelDataset> {
    let idx: Vec<usize> = OHLCV.iter().map(|c| column(headers, c).unwrap()).collect();
    let mut rows = RowSet::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |k: usize| record.get(idx[k]).unwrap_or("");
        let date = parse_date(field(0), line, path)?;
        let symbol = field(1).to_string();
        if symbol.is_empty() {
            return Err(Error::Data(format!("{}: row {line}: empty symbol", path.display())));
        }
        let mut v = [0.0; 5];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = parse_number(field(k + 2), OHLCV[k + 2], line, path)?;
        }
        if v[..4].iter().any(|&p| p <= 0.0) || v[4] < 0.0 {
            return Err(Error::Data(format!(
                "{}: row {line}: prices must be positive and volume non-negative",
                path.display()
            )));
        }
        rows.insert(
            date,
            symbol,
            Bar {
                close: v[3],
                volume: v[4],
            },
            line,
            path,
        )?;
    }
    let (dates, symbols) = rows.axes();
    let (n, s) = (dates.len(), symbols.len());
    let mut bars = vec![None; n * s];
    for ((d, sym), bar) in rows.rows {
        let t = dates.binary_search(&d).unwrap();
        let j = symbols.binary_search(&sym).unwrap();
        bars[t * s + j] = Some(bar);
    }
    let mut features = vec![None; n * s];
    let mut closes = vec![None; n * s];
    for j in 0..s {
        let series: Vec<Option<Bar>> = (0..n).map(|t| bars[t * s + j]).collect();
        for (t, f) in builtin_features(&series).into_iter().enumerate() {
            features[t * s + j] = f;
            closes[t * s + j] = series[t].map(|b| b.close);
        }
    }
    PanelDataset::new(dates, symbols, builtin_feature_names(), features, closes)
}

type PrecomputedRow = (Option<f64>, Option<Vec<f64>>);

fn load_precomputed(
    path: &Path,
    mut reader: csv::Reader<std::fs::File>,
    headers: &csv::StringRecord,
) -> Result<PanelDataset> {
    let missing: Vec<_> = ["date", "symbol", "close", "f0"]
        .into_iter()
        .filter(|c| column(headers, c).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{}: missing required columns {missing:?} (expected date,symbol,close,f0.. or date,symbol,open,high,low,close,volume)",
            path.display()
        )));
    }
    let mut feature_cols = Vec::new();
    while let Some(c) = column(headers, &format!("f{}", feature_cols.len())) {
        feature_cols.push(c);
    }
    let names: Vec<String> = (0..feature_cols.len()).map(|i| format!("f{i}")).collect();
    let (dc, sc, cc) = (
        column(headers, "date").unwrap(),
        column(headers, "symbol").unwrap(),
        column(headers, "close").unwrap(),
    );
    let mut rows: RowSet<PrecomputedRow> = RowSet::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let get = |c: usize| record.get(c).unwrap_or("");
        let date = parse_date(get(dc), line, path)?;
        let symbol = get(sc).to_string();
        if symbol.is_empty() {
            return Err(Error::Data(format!("{}: row {line}: empty symbol", path.display())));
        }
        let close = match get(cc) {
            "" => None,
            raw => {
                let c = parse_number(raw, "close", line, path)?;
                if c <= 0.0 {
                    return Err(Error::Data(format!(
                        "{}: row {line}: close must be positive",
                        path.display()
                    )));
                }
                Some(c)
            }
        };
        let empty = feature_cols.iter().filter(|&&c| get(c).is_empty()).count();
        let feats = if empty == feature_cols.len() {
            None
        } else if empty > 0 {
            return Err(Error::Data(format!(
                "{}: row {line}: feature cells must be all present or all empty",
                path.display()
            )));
        } else {
            let mut f = Vec::with_capacity(feature_cols.len());
            for (k, &c) in feature_cols.iter().enumerate() {
                f.push(parse_number(get(c), &names[k], line, path)?);
            }
            Some(f)
        };
        rows.insert(date, symbol, (close, feats), line, path)?;
    }
    let (dates, symbols) = rows.axes();
    let s = symbols.len();
    let mut features = vec![None; dates.len() * s];
    let mut closes = vec![None; dates.len() * s];
    for ((d, sym), (c, f)) in rows.rows {
        let i = dates.binary_search(&d).unwrap() * s + symbols.binary_search(&sym).unwrap();
        closes[i] = c;
        features[i] = f;
    }
    PanelDataset::new(dates, symbols, names, features, closes)
}

/// Formats `v` rounded to 12 significant digits, in the shortest form that
/// parses back to the rounded value.
pub fn format_sig12(v: f64) -> String {
    let rounded: f64 = format!("{v:.11e}").parse().unwrap();
    format!("{rounded}")
}

/// Writes the precomputed-feature layout. Numbers are rounded to 12
/// significant digits, so loading and exporting again is byte-identical.
pub fn write_panel_csv(ds: &PanelDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string(), "symbol".into(), "close".into()];
    header.extend((0..ds.n_features()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for t in 0..ds.n_dates() {
        for s in 0..ds.n_symbols() {
            let (close, feats) = (ds.close(t, s), ds.features(t, s));
            if close.is_none() && feats.is_none() {
                continue;
            }
            let mut rec = vec![ds.dates[t].format(DATE_FORMAT).to_string(), ds.symbols[s].clone()];
            rec.push(close.map(format_sig12).unwrap_or_default());
            match feats {
                Some(f) => rec.extend(f.iter().map(|&v| format_sig12(v))),
                None => rec.extend(std::iter::repeat_n(String::new(), ds.n_features())),
            }
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
