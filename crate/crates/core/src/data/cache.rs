//! Binary cache of built samples, magic `DFTD`.
//!
//! Each sample contributes five tensors named `s{i}.features`, `.market`,
//! `.labels`, `.raw_labels` and `.next_returns` (NaN marks a missing
//! return). Dates, splits and symbols go in the JSON trailer.

use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::windows::{Sample, Split};
use crate::error::{Error, Result};
use crate::framing::{self, SAMPLE_CACHE_MAGIC};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    t: usize,
    date: NaiveDate,
    split: Split,
    symbols: Vec<String>,
}

pub fn encode_samples(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(samples.len() * 5);
    for (i, s) in samples.iter().enumerate() {
        let n = s.labels.len();
        let next: Vec<f64> = s.next_returns.iter().map(|r| r.unwrap_or(f64::NAN)).collect();
        tensors.push((format!("s{i}.features"), s.features.clone()));
        tensors.push((format!("s{i}.market"), s.market.clone()));
        tensors.push((format!("s{i}.labels"), Tensor::new(&[n], s.labels.clone())?));
        tensors.push((format!("s{i}.raw_labels"), Tensor::new(&[n], s.raw_labels.clone())?));
        tensors.push((format!("s{i}.next_returns"), Tensor::new(&[n], next)?));
    }
    let meta: Vec<SampleMeta> = samples
        .iter()
        .map(|s| SampleMeta {
            t: s.t,
            date: s.date,
            split: s.split,
            symbols: s.symbols.clone(),
        })
        .collect();
    let trailer = serde_json::to_string(&meta)?;
    framing::encode(
        SAMPLE_CACHE_MAGIC,
        tensors.iter().map(|(n, t)| (n.as_str(), t)),
        &trailer,
    )
}

pub fn decode_samples(bytes: &[u8]) -> Result<Vec<Sample>> {
    let file = framing::decode(SAMPLE_CACHE_MAGIC, bytes)?;
    let meta: Vec<SampleMeta> = serde_json::from_str(&file.trailer)?;
    if file.tensors.len() != meta.len() * 5 {
        return Err(Error::Checkpoint(format!(
            "sample cache holds {} tensors for {} samples",
            file.tensors.len(),
            meta.len()
        )));
    }
    let mut tensors = file.tensors.into_iter();
    let mut next = |want: String| -> Result<Tensor> {
        let (name, t) = tensors.next().expect("count checked");
        if name != want {
            return Err(Error::Checkpoint(format!(
                "sample cache: expected tensor '{want}', found '{name}'"
            )));
        }
        Ok(t)
    };
    meta.into_iter()
        .enumerate()
        .map(|(i, m)| {
            let features = next(format!("s{i}.features"))?;
            let market = next(format!("s{i}.market"))?;
            let labels = next(format!("s{i}.labels"))?.into_data();
            let raw_labels = next(format!("s{i}.raw_labels"))?.into_data();
            let next_returns = next(format!("s{i}.next_returns"))?
                .into_data()
                .into_iter()
                .map(|r| (!r.is_nan()).then_some(r))
                .collect();
            Ok(Sample {
                t: m.t,
                date: m.date,
                split: m.split,
                symbols: m.symbols,
                features,
                market,
                labels,
                raw_labels,
                next_returns,
            })
        })
        .collect()
}

pub fn write_sample_cache(path: &Path, samples: &[Sample]) -> Result<()> {
    framing::write_file(path, &encode_samples(samples)?)
}

pub fn read_sample_cache(path: &Path) -> Result<Vec<Sample>> {
    decode_samples(&framing::read_file(path)?)
}
