//! Features derived from raw OHLCV bars.
//!
//! All windows are trailing row offsets on the date axis and end at the
//! current row. A feature vector exists only when every bar in its longest
//! window (60 rows) is present.

use crate::stats::{mean, population_std};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar {
    pub close: f64,
    pub volume: f64,
}

const RETURN_SPANS: [usize; 4] = [1, 5, 10, 20];
const MA_SPANS: [usize; 5] = [5, 10, 20, 30, 60];
const VOL_SPANS: [usize; 3] = [5, 10, 20];
const VOLUME_SPAN: usize = 20;

/// Bars needed before the first feature row, including the current one.
pub const BUILTIN_HISTORY: usize = 60;

pub fn builtin_feature_names() -> Vec<String> {
    let mut names = Vec::new();
    names.extend(RETURN_SPANS.iter().map(|k| format!("ret{k}")));
    names.extend(MA_SPANS.iter().map(|k| format!("close_ma{k}")));
    names.extend(VOL_SPANS.iter().map(|k| format!("vol{k}")));
    names.push(format!("volume_z{VOLUME_SPAN}"));
    names
}

/// Builtin features for one symbol:
/// - `ret{k}`: `c_t / c_{t−k} − 1`
/// - `close_ma{k}`: `c_t / mean(c_{t−k+1..=t})`
/// - `vol{k}`: population std of the last `k` one-day returns
/// - `volume_z20`: z-score of today's volume in the last 20 volumes (0 when flat)
pub fn builtin_features(series: &[Option<Bar>]) -> Vec<Option<Vec<f64>>> {
    let mut out = vec![None; series.len()];
    for t in BUILTIN_HISTORY - 1..series.len() {
        let window = &series[t + 1 - BUILTIN_HISTORY..=t];
        let Some(bars) = window.iter().copied().collect::<Option<Vec<Bar>>>() else {
            continue;
        };
        let last = bars.len() - 1;
        let close = |back: usize| bars[last - back].close;
        let rets: Vec<f64> = (1..bars.len())
            .map(|i| bars[i].close / bars[i - 1].close - 1.0)
            .collect();

        let mut f = Vec::with_capacity(13);
        f.extend(RETURN_SPANS.iter().map(|&k| close(0) / close(k) - 1.0));
        f.extend(MA_SPANS.iter().map(|&k| {
            let closes: Vec<f64> = (0..k).map(close).collect();
            close(0) / mean(&closes)
        }));
        f.extend(VOL_SPANS.iter().map(|&k| population_std(&rets[rets.len() - k..])));
        let volumes: Vec<f64> = bars[bars.len() - VOLUME_SPAN..].iter().map(|b| b.volume).collect();
        let sd = population_std(&volumes);
        f.push(if sd > 1e-12 {
            (bars[last].volume - mean(&volumes)) / sd
        } else {
            0.0
        });
        out[t] = Some(f);
    }
    out
}
