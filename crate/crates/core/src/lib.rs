//! SDR-to-HDR translation pipeline: a pixel-independent, globally conditioned
//! color-mapping network (AUCT) composed with a U-Net local-enhancement stage
//! (LE), plus the color science, quality metrics, dataset handling, and
//! training machinery needed to build, train, and benchmark it.

pub mod color;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
