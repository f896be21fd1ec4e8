use super::panel::PanelDataset;
use crate::error::{Error, Result};
use crate::stats::{mean, population_std};

/// Days whose cross-sectional std is at or below this are dropped.
pub const MIN_LABEL_STD: f64 = 1e-12;

/// `r̃_{t,s} = (c_{t+d} − c_{t+1}) / c_{t+1}`, date-major; `None` when
/// either close is missing or `t + d` runs past the panel.
pub fn compute_raw_labels(ds: &PanelDataset, horizon: usize) -> Vec<Vec<Option<f64>>> {
    (0..ds.n_dates())
        .map(|t| {
            (0..ds.n_symbols())
                .map(|s| {
                    if t + horizon >= ds.n_dates() {
                        return None;
                    }
                    let entry = ds.close(t + 1, s)?;
                    let exit = ds.close(t + horizon, s)?;
                    Some((exit - entry) / entry)
                })
                .collect()
        })
        .collect()
}

/// `(v − mean) / std` with population std. Fails when there are fewer
/// than two values or the values are (numerically) constant.
pub fn zscore_cross_section(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::Data(format!("{} stock(s), need at least 2", values.len())));
    }
    let m = mean(values);
    let sd = population_std(values);
    if !(sd > MIN_LABEL_STD) {
        return Err(Error::Data(format!("cross-sectional std {sd:e} too small")));
    }
    Ok(values.iter().map(|v| (v - m) / sd).collect())
}
