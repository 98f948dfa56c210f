pub mod blocks;
pub mod codec;
pub mod distortion;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod media;
pub mod metrics;
pub mod net;
pub mod params;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
