//! Parameterized building blocks: linear maps, residual FFNs, multi-head
//! attention across stocks and RWKV time mixing across steps.

mod attention;
mod linear;
mod rwkv;

pub use attention::MultiHeadAttention;
pub use linear::{FfnBlock, LayerNorm, Linear};
pub use rwkv::{ChannelMix, RwkvBlock, RwkvStack, TimeMix};
