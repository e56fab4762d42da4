//! Transfer functions: Rec.2100 perceptual quantizer and Rec.709 gamma.
//!
//! All scalar functions evaluate in f64. Constants are frozen here and are
//! not runtime-configurable, so metric results cannot drift silently.

use super::{ClampStats, ColorState, Gamut, ImagePlanar, TransferFn};
use crate::error::Result;

// Perceptual quantizer constants (ITU-R BT.2100-2, SMPTE ST 2084).
// Input is linear luminance as a fraction of 10000 cd/m^2.
pub const PQ_M1: f64 = 2610.0 / 16384.0;
pub const PQ_M2: f64 = 2523.0 / 4096.0 * 128.0;
pub const PQ_C1: f64 = 3424.0 / 4096.0;
pub const PQ_C2: f64 = 2413.0 / 4096.0 * 32.0;
pub const PQ_C3: f64 = 2392.0 / 4096.0 * 32.0;

// Rec.709 OETF. BT.709-6 prints the rounded constants (1.099, 0.099, knee
// 0.018); with those the two branches disagree by ~2.5e-4 at the knee and a
// true mutual inverse is impossible. We freeze the high-precision solutions
// (the same values BT.2020 specifies for 12-bit), where both branches meet.
pub const G709_KNEE_LINEAR: f64 = 0.018053968510807;
pub const G709_KNEE_ENCODED: f64 = 4.5 * G709_KNEE_LINEAR;
pub const G709_SLOPE: f64 = 4.5;
pub const G709_A: f64 = 1.09929682680944;
pub const G709_B: f64 = G709_A - 1.0;
pub const G709_POWER: f64 = 0.45;

/// Linear fraction of peak -> PQ-encoded value. Out-of-range input clamps.
pub fn pq_oetf(y: f64) -> f64 {
    let y = y.clamp(0.0, 1.0);
    let yp = y.powf(PQ_M1);
    ((PQ_C1 + PQ_C2 * yp) / (1.0 + PQ_C3 * yp)).powf(PQ_M2)
}

/// PQ-encoded value -> linear fraction of peak (exact functional inverse).
pub fn pq_eotf(e: f64) -> f64 {
    let e = e.clamp(0.0, 1.0);
    let ep = e.powf(1.0 / PQ_M2);
    let num = (ep - PQ_C1).max(0.0);
    let den = PQ_C2 - PQ_C3 * ep;
    (num / den).powf(1.0 / PQ_M1)
}

/// Linear light -> Rec.709 gamma-encoded value.
pub fn gamma709_encode(l: f64) -> f64 {
    let l = l.clamp(0.0, 1.0);
    if l < G709_KNEE_LINEAR {
        G709_SLOPE * l
    } else {
        G709_A * l.powf(G709_POWER) - G709_B
    }
}

/// Rec.709 gamma-encoded value -> linear light.
pub fn gamma709_decode(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v < G709_KNEE_ENCODED {
        v / G709_SLOPE
    } else {
        ((v + G709_B) / G709_A).powf(1.0 / G709_POWER)
    }
}

fn apply_transfer(
    img: &ImagePlanar,
    from: TransferFn,
    to: TransferFn,
    f: impl Fn(f64) -> f64,
) -> Result<(ImagePlanar, ClampStats)> {
    img.expect_state(
        ColorState {
            transfer: from,
            gamut: img.state.gamut,
        },
        "apply_transfer",
    )?;
    let data: Vec<f32> = img.data().iter().map(|&v| f(v as f64) as f32).collect();
    let state = ColorState {
        transfer: to,
        gamut: img.state.gamut,
    };
    ImagePlanar::from_clamped(img.height, img.width, data, state)
}

/// Decode a PQ image to linear light (same gamut).
pub fn image_pq_to_linear(img: &ImagePlanar) -> Result<(ImagePlanar, ClampStats)> {
    apply_transfer(img, TransferFn::Pq, TransferFn::Linear, pq_eotf)
}

/// Encode a linear image with PQ (same gamut).
pub fn image_linear_to_pq(img: &ImagePlanar) -> Result<(ImagePlanar, ClampStats)> {
    apply_transfer(img, TransferFn::Linear, TransferFn::Pq, pq_oetf)
}

/// Decode a gamma-encoded Rec.709 image to linear light.
pub fn image_gamma709_to_linear(img: &ImagePlanar) -> Result<(ImagePlanar, ClampStats)> {
    debug_assert_eq!(img.state.gamut, Gamut::Rec709);
    apply_transfer(img, TransferFn::Gamma709, TransferFn::Linear, gamma709_decode)
}

/// Encode a linear Rec.709 image with the Rec.709 OETF.
pub fn image_linear_to_gamma709(img: &ImagePlanar) -> Result<(ImagePlanar, ClampStats)> {
    apply_transfer(img, TransferFn::Linear, TransferFn::Gamma709, gamma709_encode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pq_boundaries() {
        // OETF(0) is c1^m2 ~ 7.3e-7, treated as 0 at 1e-6 tolerance.
        assert!(pq_oetf(0.0).abs() < 1e-6);
        assert!((pq_oetf(1.0) - 1.0).abs() < 1e-12);
        assert_eq!(pq_eotf(0.0), 0.0);
        assert!((pq_eotf(1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pq_100_nits_reference_value() {
        // Independent straight-line evaluation of the closed form at y = 0.01.
        let y: f64 = 0.01;
        let yp = y.powf(2610.0 / 16384.0);
        let expected = ((3424.0 / 4096.0 + (2413.0 / 4096.0 * 32.0) * yp)
            / (1.0 + (2392.0 / 4096.0 * 32.0) * yp))
            .powf(2523.0 / 4096.0 * 128.0);
        assert_eq!(pq_oetf(0.01), expected);
        assert!((expected - 0.5081).abs() < 2e-4, "PQ(0.01) = {expected}");
    }

    #[test]
    fn pq_round_trip_1001_grid() {
        let mut max_err = 0.0f64;
        for i in 0..=1000 {
            let y = i as f64 / 1000.0;
            let err = (pq_eotf(pq_oetf(y)) - y).abs();
            max_err = max_err.max(err);
        }
        assert!(max_err < 1e-6, "max abs error {max_err}");
    }

    #[test]
    fn pq_strictly_monotone_10k_grid() {
        let mut prev = pq_oetf(0.0);
        for i in 1..=10_000 {
            let e = pq_oetf(i as f64 / 10_000.0);
            assert!(e > prev, "not monotone at grid point {i}");
            prev = e;
        }
    }

    #[test]
    fn gamma709_boundaries_and_knee() {
        assert_eq!(gamma709_encode(0.0), 0.0);
        assert!((gamma709_encode(1.0) - 1.0).abs() < 1e-6);
        // L = 0.018 sits below the precise knee, so the linear branch rules
        // and gives the textbook 0.081; at the knee both branches agree.
        assert!((gamma709_encode(0.018) - 0.081).abs() < 1e-12);
        let linear_branch = G709_SLOPE * G709_KNEE_LINEAR;
        let power_branch = G709_A * G709_KNEE_LINEAR.powf(G709_POWER) - G709_B;
        assert!((power_branch - linear_branch).abs() < 1e-7);
    }

    #[test]
    fn gamma709_round_trip_1001_grid() {
        let mut max_enc = 0.0f64;
        let mut max_dec = 0.0f64;
        for i in 0..=1000 {
            let v = i as f64 / 1000.0;
            max_enc = max_enc.max((gamma709_decode(gamma709_encode(v)) - v).abs());
            max_dec = max_dec.max((gamma709_encode(gamma709_decode(v)) - v).abs());
        }
        assert!(max_enc < 1e-6, "decode(encode) max err {max_enc}");
        assert!(max_dec < 1e-6, "encode(decode) max err {max_dec}");
    }
}
