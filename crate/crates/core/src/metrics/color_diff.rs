//! ITP color difference for PQ-encoded Rec.2020 image pairs
//! (720 * sqrt(dI^2 + dT^2 + dP^2), averaged over pixels).

use crate::color::gamut::rgb2020_to_itp;
use crate::color::transfer::pq_eotf;
use crate::color::{ColorState, ImagePlanar};
use crate::error::{Error, Result};

pub fn delta_e_itp(a: &ImagePlanar, b: &ImagePlanar) -> Result<f64> {
    a.expect_state(ColorState::HDR, "delta_e_itp")?;
    b.expect_state(ColorState::HDR, "delta_e_itp")?;
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(
            "delta_e_itp",
            format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
        ));
    }
    let hw = a.height * a.width;
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0f64;
    for i in 0..hw {
        let itp_a = pixel_itp(da, hw, i);
        let itp_b = pixel_itp(db, hw, i);
        let (di, dt, dp) = (
            itp_a[0] - itp_b[0],
            itp_a[1] - itp_b[1],
            itp_a[2] - itp_b[2],
        );
        total += 720.0 * (di * di + dt * dt + dp * dp).sqrt();
    }
    Ok(total / hw as f64)
}

fn pixel_itp(data: &[f32], hw: usize, i: usize) -> [f64; 3] {
    let rgb_linear = [
        pq_eotf(data[i] as f64),
        pq_eotf(data[hw + i] as f64),
        pq_eotf(data[2 * hw + i] as f64),
    ];
    rgb2020_to_itp(rgb_linear)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::transfer::pq_oetf;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(data: Vec<f32>, h: usize, w: usize) -> ImagePlanar {
        ImagePlanar::new(h, w, data, ColorState::HDR).unwrap()
    }

    #[test]
    fn identical_images_give_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = img((0..3 * 16).map(|_| rng.gen::<f32>()).collect(), 4, 4);
        assert_eq!(delta_e_itp(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn gray_pair_reduces_to_intensity_difference() {
        // (g1,g1,g1) vs (g2,g2,g2): T and P cancel, dE = 720 |dI|.
        let g1 = 0.55f32;
        let g2 = 0.61f32;
        let a = img(vec![g1; 12], 2, 2);
        let b = img(vec![g2; 12], 2, 2);
        let got = delta_e_itp(&a, &b).unwrap();
        let i1 = rgb2020_to_itp([pq_eotf(g1 as f64); 3])[0];
        let i2 = rgb2020_to_itp([pq_eotf(g2 as f64); 3])[0];
        assert!((got - 720.0 * (i1 - i2).abs()).abs() < 1e-9, "{got}");
    }

    #[test]
    fn random_pixel_matches_straight_line_oracle() {
        // Independent f64 evaluation of the full chain for one pixel pair.
        let pa = [0.31f32, 0.62, 0.18];
        let pb = [0.42f32, 0.51, 0.77];
        let a = img(vec![pa[0], pa[1], pa[2]], 1, 1);
        let b = img(vec![pb[0], pb[1], pb[2]], 1, 1);
        let got = delta_e_itp(&a, &b).unwrap();

        let lin = |e: f32| {
            let e = e as f64;
            let ep = e.powf(4096.0 / (2523.0 * 128.0));
            let num = (ep - 3424.0 / 4096.0).max(0.0);
            let den = 2413.0 / 4096.0 * 32.0 - 2392.0 / 4096.0 * 32.0 * ep;
            (num / den).powf(16384.0 / 2610.0)
        };
        let itp = |rgb: [f64; 3]| {
            let l = (1688.0 * rgb[0] + 2146.0 * rgb[1] + 262.0 * rgb[2]) / 4096.0;
            let m = (683.0 * rgb[0] + 2951.0 * rgb[1] + 462.0 * rgb[2]) / 4096.0;
            let s = (99.0 * rgb[0] + 309.0 * rgb[1] + 3688.0 * rgb[2]) / 4096.0;
            let pq = |y: f64| {
                let yp = y.powf(2610.0 / 16384.0);
                ((3424.0 / 4096.0 + 18.8515625 * yp) / (1.0 + 18.6875 * yp)).powf(78.84375)
            };
            let (lp, mp, sp) = (pq(l), pq(m), pq(s));
            [
                0.5 * (lp + mp),
                0.5 * (6610.0 * lp - 13613.0 * mp + 7003.0 * sp) / 4096.0,
                (17933.0 * lp - 17390.0 * mp - 543.0 * sp) / 4096.0,
            ]
        };
        let ia = itp([lin(pa[0]), lin(pa[1]), lin(pa[2])]);
        let ib = itp([lin(pb[0]), lin(pb[1]), lin(pb[2])]);
        let expect = 720.0
            * ((ia[0] - ib[0]).powi(2) + (ia[1] - ib[1]).powi(2) + (ia[2] - ib[2]).powi(2)).sqrt();
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = img((0..3 * 64).map(|_| rng.gen::<f32>()).collect(), 8, 8);
        let b = img((0..3 * 64).map(|_| rng.gen::<f32>()).collect(), 8, 8);
        let d1 = delta_e_itp(&a, &b).unwrap();
        let d2 = delta_e_itp(&b, &a).unwrap();
        assert_eq!(d1, d2);
        assert!(d1 >= 0.0);
    }

    #[test]
    fn rejects_non_hdr_state() {
        let a = ImagePlanar::new(2, 2, vec![0.5; 12], crate::color::ColorState::SDR).unwrap();
        let b = img(vec![0.5; 12], 2, 2);
        assert!(delta_e_itp(&a, &b).is_err());
    }

    #[test]
    fn pq_eotf_is_consistent_with_oetf_here() {
        for i in 0..=20 {
            let y = i as f64 / 20.0;
            assert!((pq_eotf(pq_oetf(y)) - y).abs() < 1e-6);
        }
    }
}
