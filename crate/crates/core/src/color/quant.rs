//! Integer quantization. Rounding is half-away-from-zero everywhere so
//! results are bit-exact across implementations.

use super::{ColorState, ImagePlanar};
use crate::error::{Error, Result};

/// `round(v * (2^bits - 1))`, half away from zero, clamped to range.
pub fn quantize_value(v: f32, bits: u32) -> u16 {
    let max = ((1u32 << bits) - 1) as f64;
    let scaled = v as f64 * max;
    // f64::round rounds half away from zero.
    scaled.round().clamp(0.0, max) as u16
}

pub fn dequantize_value(q: u16, bits: u32) -> f32 {
    let max = ((1u32 << bits) - 1) as f64;
    (q as f64 / max) as f32
}

/// Quantize a whole image to `bits` (8 or 16) integers, planar order.
pub fn quantize_image(img: &ImagePlanar, bits: u32) -> Result<Vec<u16>> {
    if bits != 8 && bits != 16 {
        return Err(Error::invalid("quantize", format!("bits {bits} not in {{8,16}}")));
    }
    Ok(img.data().iter().map(|&v| quantize_value(v, bits)).collect())
}

/// Rebuild an image from planar integers.
pub fn dequantize_image(
    ints: &[u16],
    bits: u32,
    height: usize,
    width: usize,
    state: ColorState,
) -> Result<ImagePlanar> {
    if bits != 8 && bits != 16 {
        return Err(Error::invalid("dequantize", format!("bits {bits} not in {{8,16}}")));
    }
    let data = ints.iter().map(|&q| dequantize_value(q, bits)).collect();
    ImagePlanar::new(height, width, data, state)
}

/// Snap every value to its `bits`-deep representable level (quantize then
/// dequantize in place). Models the storage precision of a file format.
pub fn requantize_in_place(data: &mut [f32], bits: u32) {
    for v in data.iter_mut() {
        *v = dequantize_value(quantize_value(*v, bits), bits);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_16_bit() {
        assert_eq!(quantize_value(1.0, 16), 65535);
        assert_eq!(quantize_value(0.0, 16), 0);
    }

    #[test]
    fn half_rounds_away_from_zero() {
        // 0.5 * 255 = 127.5 -> 128
        assert_eq!(quantize_value(0.5, 8), 128);
    }

    #[test]
    fn round_trip_error_bound_8_bit_exhaustive() {
        // Dense sweep: every dequantized value must round-trip with error at
        // most half a quantization step (plus f32 storage rounding).
        let half_step = 0.5 / 255.0;
        for i in 0..=10_000 {
            let v = i as f64 / 10_000.0;
            let back = dequantize_value(quantize_value(v as f32, 8), 8) as f64;
            assert!(
                (back - v).abs() <= half_step + 1e-6,
                "v={v} back={back}"
            );
        }
        // and quantize(dequantize(q)) is the identity on levels
        for q in 0..=255u16 {
            assert_eq!(quantize_value(dequantize_value(q, 8), 8), q);
        }
    }
}
