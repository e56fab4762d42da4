//! Gamut conversion (Rec.709 <-> Rec.2020) and the ICtCp opponent space.

use super::{ClampStats, ColorState, ImagePlanar};
use crate::error::Result;

/// Linear Rec.709 -> linear Rec.2020 (ITU-R BT.2087 matrix, rows sum to 1).
pub const M_709_TO_2020: [[f64; 3]; 3] = [
    [0.6274, 0.3293, 0.0433],
    [0.0691, 0.9195, 0.0114],
    [0.0164, 0.0880, 0.8956],
];

// Linear Rec.2020 RGB -> LMS, from ITU-R BT.2100-2 (ICtCp definition).
const M_RGB2020_TO_LMS: [[f64; 3]; 3] = [
    [1688.0 / 4096.0, 2146.0 / 4096.0, 262.0 / 4096.0],
    [683.0 / 4096.0, 2951.0 / 4096.0, 462.0 / 4096.0],
    [99.0 / 4096.0, 309.0 / 4096.0, 3688.0 / 4096.0],
];

pub fn mat3_apply(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat3_invert(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv_det = 1.0 / det;
    let mut out = [[0.0; 3]; 3];
    out[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    out[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    out[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    out[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    out[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    out[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    out[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    out[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    out[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    out
}

/// One linear Rec.709 pixel -> linear Rec.2020.
pub fn rgb709_to_2020(rgb: [f64; 3]) -> [f64; 3] {
    mat3_apply(&M_709_TO_2020, rgb)
}

/// One linear Rec.2020 pixel -> linear Rec.709 (inverse matrix; values can
/// leave [0,1] for out-of-709-gamut colors).
pub fn rgb2020_to_709(rgb: [f64; 3]) -> [f64; 3] {
    // Inverted once at first use; deterministic.
    use std::sync::OnceLock;
    static INV: OnceLock<[[f64; 3]; 3]> = OnceLock::new();
    mat3_apply(INV.get_or_init(|| mat3_invert(&M_709_TO_2020)), rgb)
}

/// Linear Rec.2020 pixel -> (I, T, P) per ITU-R BT.2100/BT.2124:
/// PQ-encode LMS, then I = (L'+M')/2, T = Ct/2, P = Cp.
pub fn rgb2020_to_itp(rgb: [f64; 3]) -> [f64; 3] {
    let lms = mat3_apply(&M_RGB2020_TO_LMS, rgb);
    let lp = super::transfer::pq_oetf(lms[0]);
    let mp = super::transfer::pq_oetf(lms[1]);
    let sp = super::transfer::pq_oetf(lms[2]);
    let i = 0.5 * lp + 0.5 * mp;
    let ct = (6610.0 * lp - 13613.0 * mp + 7003.0 * sp) / 4096.0;
    let cp = (17933.0 * lp - 17390.0 * mp - 543.0 * sp) / 4096.0;
    [i, 0.5 * ct, cp]
}

/// Convert a whole linear Rec.709 image to linear Rec.2020, clamping and
/// counting out-of-gamut results.
pub fn image_709_to_2020(img: &ImagePlanar) -> Result<(ImagePlanar, ClampStats)> {
    img.expect_state(ColorState::LINEAR_709, "image_709_to_2020")?;
    let hw = img.height * img.width;
    let src = img.data();
    let mut out = vec![0.0f32; 3 * hw];
    for i in 0..hw {
        let rgb = [src[i] as f64, src[hw + i] as f64, src[2 * hw + i] as f64];
        let dst = rgb709_to_2020(rgb);
        out[i] = dst[0] as f32;
        out[hw + i] = dst[1] as f32;
        out[2 * hw + i] = dst[2] as f32;
    }
    ImagePlanar::from_clamped(img.height, img.width, out, ColorState::LINEAR_2020)
}
