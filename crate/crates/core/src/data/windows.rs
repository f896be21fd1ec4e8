use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::labels::{compute_raw_labels, zscore_cross_section};
use super::market::MarketFeatures;
use super::panel::PanelDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Chronological split of the eligible sample dates. Explicit boundary
/// dates take precedence over the fractions when both are set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub valid_fraction: f64,
    /// First validation date.
    pub valid_start: Option<NaiveDate>,
    /// First test date.
    pub test_start: Option<NaiveDate>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        // 12.25 years train, 3 months valid, 3.75 years test out of 16.
        Self {
            train_fraction: 0.765625,
            valid_fraction: 0.015625,
            valid_start: None,
            test_start: None,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.train_fraction, self.valid_fraction);
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a + b > 1.0 {
            return Err(Error::Config(format!(
                "split: fractions must lie in [0, 1] and sum to at most 1, got train {a}, valid {b}"
            )));
        }
        match (self.valid_start, self.test_start) {
            (None, None) => Ok(()),
            (Some(v), Some(t)) if v <= t => Ok(()),
            (Some(_), Some(_)) => Err(Error::Config(
                "split.valid_start must not be after split.test_start".into(),
            )),
            _ => Err(Error::Config(
                "split.valid_start and split.test_start must be given together".into(),
            )),
        }
    }

    fn assign(&self, dates: &[NaiveDate]) -> Vec<Split> {
        if let (Some(v), Some(t)) = (self.valid_start, self.test_start) {
            return dates
                .iter()
                .map(|d| match d {
                    d if *d < v => Split::Train,
                    d if *d < t => Split::Valid,
                    _ => Split::Test,
                })
                .collect();
        }
        let n = dates.len() as f64;
        let train_end = (n * self.train_fraction).round() as usize;
        let valid_end = (n * (self.train_fraction + self.valid_fraction)).round() as usize;
        (0..dates.len())
            .map(|i| match i {
                i if i < train_end => Split::Train,
                i if i < valid_end => Split::Valid,
                _ => Split::Test,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    /// `T`, feature rows per sample.
    pub lookback: usize,
    /// `k_c`; market rows per sample are `T · k_c`.
    pub market_kernel: usize,
    /// `d`, the label horizon in trading days.
    pub horizon: usize,
}

impl WindowSpec {
    pub fn market_rows(&self) -> usize {
        self.lookback * self.market_kernel
    }
}

/// One trading day's cross-section.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Row of the panel's date axis.
    pub t: usize,
    pub date: NaiveDate,
    pub split: Split,
    /// Included symbols, sorted.
    pub symbols: Vec<String>,
    /// `[S×T×F]`
    pub features: Tensor,
    /// `[(T·k_c)×M]`
    pub market: Tensor,
    /// Cross-sectionally z-scored labels.
    pub labels: Vec<f64>,
    pub raw_labels: Vec<f64>,
    /// `c_{t+2} / c_{t+1} − 1`, the return realised by a position entered
    /// at the `t+1` close; `None` when a close is missing.
    pub next_returns: Vec<Option<f64>>,
}

/// Builds one sample per eligible date.
///
/// A date `t` is eligible when the market window rows `t−T·k_c+1..=t` all
/// exist and `t + d` lies inside the panel. A stock is kept when it has
/// features on every row `t−T+1..=t` and both label closes. Days with
/// fewer than two stocks or constant labels are skipped.
pub fn build_windows(
    ds: &PanelDataset,
    market: &MarketFeatures,
    spec: &WindowSpec,
    split: &SplitConfig,
) -> Result<Vec<Sample>> {
    if spec.lookback == 0 || spec.market_kernel == 0 {
        return Err(Error::Config("lookback and market_kernel must be positive".into()));
    }
    if spec.horizon < 2 {
        return Err(Error::Config(format!(
            "data.horizon must be at least 2 (labels start at t+1), got {}",
            spec.horizon
        )));
    }
    split.validate()?;
    if market.dates != ds.dates() {
        return Err(Error::Data(
            "market features are not aligned with the panel dates".into(),
        ));
    }
    let (t_len, m_rows, m_width, f) = (spec.lookback, spec.market_rows(), market.width(), ds.n_features());
    let raw = compute_raw_labels(ds, spec.horizon);
    let mut samples = Vec::new();
    for t in m_rows - 1..ds.n_dates() {
        if t + spec.horizon >= ds.n_dates() {
            break;
        }
        let Some(m_window) = (t + 1 - m_rows..=t)
            .map(|r| market.values[r].as_deref())
            .collect::<Option<Vec<&[f64]>>>()
        else {
            continue;
        };
        let mut symbols = Vec::new();
        let mut feats = Vec::new();
        let mut raw_labels = Vec::new();
        let mut next_returns = Vec::new();
        for s in 0..ds.n_symbols() {
            let Some(label) = raw[t][s] else { continue };
            let Some(window) = (t + 1 - t_len..=t)
                .map(|r| ds.features(r, s))
                .collect::<Option<Vec<_>>>()
            else {
                continue;
            };
            symbols.push(ds.symbols()[s].clone());
            feats.extend(window.into_iter().flatten().copied());
            raw_labels.push(label);
            let entry = ds.close(t + 1, s).expect("label close present");
            next_returns.push(ds.close(t + 2, s).map(|c| c / entry - 1.0));
        }
        let labels = match zscore_cross_section(&raw_labels) {
            Ok(z) => z,
            Err(e) => {
                log::debug!("skipping {}: {e}", ds.dates()[t]);
                continue;
            }
        };
        samples.push(Sample {
            t,
            date: ds.dates()[t],
            split: Split::Train,
            features: Tensor::new(&[symbols.len(), t_len, f], feats)?,
            market: Tensor::new(&[m_rows, m_width], m_window.concat())?,
            symbols,
            labels,
            raw_labels,
            next_returns,
        });
    }
    if samples.is_empty() {
        return Err(Error::Config(format!(
            "no eligible sample dates: {} dates, lookback {}, market window {m_rows}, horizon {}",
            ds.n_dates(),
            spec.lookback,
            spec.horizon
        )));
    }
    let dates: Vec<_> = samples.iter().map(|s| s.date).collect();
    for (s, sp) in samples.iter_mut().zip(split.assign(&dates)) {
        s.split = sp;
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_split_is_chronological() {
        let d0 = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let dates: Vec<_> = (0..64).map(|i| d0 + chrono::Days::new(i)).collect();
        let s = SplitConfig::default().assign(&dates);
        assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 49);
        assert_eq!(s.iter().filter(|&&x| x == Split::Valid).count(), 1);
        assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 14);
        assert!(s.windows(2).all(|w| w[0] as u8 <= w[1] as u8));
    }

    #[test]
    fn date_split_uses_boundaries() {
        let d = |day| NaiveDate::from_ymd_opt(2024, 1, day).unwrap();
        let cfg = SplitConfig {
            valid_start: Some(d(3)),
            test_start: Some(d(5)),
            ..SplitConfig::default()
        };
        cfg.validate().unwrap();
        let s = cfg.assign(&[d(1), d(3), d(4), d(5), d(9)]);
        assert_eq!(s, [Split::Train, Split::Valid, Split::Valid, Split::Test, Split::Test]);
        let half = SplitConfig {
            test_start: None,
            ..cfg
        };
        assert!(half.validate().is_err());
    }
}
