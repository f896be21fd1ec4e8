pub mod backtest;
pub mod data;
pub mod error;
pub mod eval;
pub mod framing;
pub mod layers;
pub mod model;
pub mod seed;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
