//! Color science: transfer functions, gamut conversion, ICtCp, quantization,
//! and PNG I/O. This is the boundary between files and the network's
//! normalized [0,1] domain.
//!
//! Conventions: SDR files are gamma-encoded Rec.709; HDR files are PQ-encoded
//! Rec.2020 stored as 16-bit PNG. The networks operate directly on encoded
//! [0,1] values; nothing inside the model path linearizes.

pub mod gamut;
pub mod png;
pub mod quant;
pub mod transfer;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferFn {
    Gamma709,
    Pq,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gamut {
    Rec709,
    Rec2020,
}

/// Declared interpretation of an image's values (always normalized [0,1]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColorState {
    pub transfer: TransferFn,
    pub gamut: Gamut,
}

impl ColorState {
    pub const SDR: ColorState = ColorState {
        transfer: TransferFn::Gamma709,
        gamut: Gamut::Rec709,
    };
    pub const HDR: ColorState = ColorState {
        transfer: TransferFn::Pq,
        gamut: Gamut::Rec2020,
    };
    pub const LINEAR_709: ColorState = ColorState {
        transfer: TransferFn::Linear,
        gamut: Gamut::Rec709,
    };
    pub const LINEAR_2020: ColorState = ColorState {
        transfer: TransferFn::Linear,
        gamut: Gamut::Rec2020,
    };
}

impl std::fmt::Display for ColorState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}/{:?}", self.transfer, self.gamut)
    }
}

/// Channel-major (3 x H x W) floating image in a declared color state.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlanar {
    pub height: usize,
    pub width: usize,
    /// R plane, then G, then B; row-major; values in [0,1].
    data: Vec<f32>,
    pub state: ColorState,
}

/// How many values were clamped while importing external data.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClampStats {
    pub below: usize,
    pub above: usize,
}

impl ClampStats {
    pub fn total(&self) -> usize {
        self.below + self.above
    }
}

impl ImagePlanar {
    /// Validates range and finiteness.
    pub fn new(height: usize, width: usize, data: Vec<f32>, state: ColorState) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape(
                "ImagePlanar::new",
                format!("{}x{} wants {} values, got {}", height, width, 3 * height * width, data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "ImagePlanar::new".into(),
                index: i,
            });
        }
        if let Some(i) = data.iter().position(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid(
                "ImagePlanar::new",
                format!("value {} out of [0,1] at flat index {i}", data[i]),
            ));
        }
        Ok(ImagePlanar {
            height,
            width,
            data,
            state,
        })
    }

    /// Clamps incoming values into [0,1], counting how many needed it.
    pub fn from_clamped(
        height: usize,
        width: usize,
        mut data: Vec<f32>,
        state: ColorState,
    ) -> Result<(Self, ClampStats)> {
        if data.len() != 3 * height * width {
            return Err(Error::shape(
                "ImagePlanar::from_clamped",
                format!("{}x{} wants {} values, got {}", height, width, 3 * height * width, data.len()),
            ));
        }
        let mut stats = ClampStats::default();
        for v in &mut data {
            if !v.is_finite() || *v < 0.0 {
                *v = 0.0;
                stats.below += 1;
            } else if *v > 1.0 {
                *v = 1.0;
                stats.above += 1;
            }
        }
        Ok((
            ImagePlanar {
                height,
                width,
                data,
                state,
            },
            stats,
        ))
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let hw = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[hw + i], self.data[2 * hw + i]]
    }

    /// View as a 3 x H x W tensor (copy).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.data.clone()).expect("sizes agree")
    }

    /// Import a 3 x H x W tensor, clamping into [0,1].
    pub fn from_tensor_clamped(t: &Tensor, state: ColorState) -> Result<(Self, ClampStats)> {
        let (c, h, w) = t.as_chw()?;
        if c != 3 {
            return Err(Error::shape(
                "ImagePlanar::from_tensor_clamped",
                format!("expected 3 channels, got {c}"),
            ));
        }
        Self::from_clamped(h, w, t.data().to_vec(), state)
    }

    pub fn expect_state(&self, expected: ColorState, _op: &'static str) -> Result<()> {
        if self.state != expected {
            return Err(Error::ColorState {
                expected: expected.to_string(),
                actual: self.state.to_string(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ImagePlanar::new(1, 1, vec![0.0, 0.5, 1.2], ColorState::SDR).is_err());
        assert!(ImagePlanar::new(1, 1, vec![0.0, 0.5, 1.0], ColorState::SDR).is_ok());
    }

    #[test]
    fn clamped_import_counts() {
        let (img, stats) =
            ImagePlanar::from_clamped(1, 1, vec![-0.1, 0.5, 1.5], ColorState::HDR).unwrap();
        assert_eq!(stats, ClampStats { below: 1, above: 1 });
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn state_check_reports_mismatch() {
        let img = ImagePlanar::new(1, 1, vec![0.0; 3], ColorState::SDR).unwrap();
        assert!(img.expect_state(ColorState::HDR, "test").is_err());
        assert!(img.expect_state(ColorState::SDR, "test").is_ok());
    }
}
