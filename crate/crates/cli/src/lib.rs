//! Library side of the `dft` binary, so runs can also be driven from tests.

pub mod commands;
pub mod config;

pub use config::{DataConfig, MarketMode, RunConfig};
