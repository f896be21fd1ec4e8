//! Panel ingestion, labels, market features, window building and a
//! synthetic generator.

mod cache;
mod features;
mod labels;
mod market;
mod panel;
mod synth;
mod windows;

pub use cache::{decode_samples, encode_samples, read_sample_cache, write_sample_cache};
pub use features::{builtin_feature_names, builtin_features, Bar, BUILTIN_HISTORY};
pub use labels::{compute_raw_labels, zscore_cross_section, MIN_LABEL_STD};
pub use market::{
    build_market_features, load_market_csv, write_market_csv, MarketFeatures, MarketSeries, DEFAULT_INTERVALS,
};
pub use panel::{format_sig12, load_panel_csv, write_panel_csv, PanelDataset, DATE_FORMAT};
pub use synth::{business_days, synth_generate, SynthConfig};
pub use windows::{build_windows, Sample, Split, SplitConfig, WindowSpec};
