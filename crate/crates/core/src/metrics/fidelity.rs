//! PSNR and SSIM. Both run on the stored (encoded-domain) [0,1] values in
//! f64; SSIM is computed on Rec.2020 luma.

use crate::color::ImagePlanar;
use crate::error::{Error, Result};

/// PSNR of identical images is reported as this capped value.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Rec.2020 luma coefficients.
pub const LUMA: [f64; 3] = [0.2627, 0.6780, 0.0593];

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// True when MSE was exactly zero and the value is the cap.
    pub identical: bool,
}

fn check_same_extent(a: &ImagePlanar, b: &ImagePlanar, op: &'static str) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
        ));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)` over all channels and pixels.
pub fn psnr(a: &ImagePlanar, b: &ImagePlanar, peak: f64) -> Result<Psnr> {
    check_same_extent(a, b, "psnr")?;
    let mut se = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x as f64 - y as f64;
        se += d * d;
    }
    let mse = se / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(Psnr { db: PSNR_CAP_DB, identical: true });
    }
    Ok(Psnr {
        db: 10.0 * (peak * peak / mse).log10(),
        identical: false,
    })
}

/// Rec.2020 luma plane in f64.
pub fn luma(img: &ImagePlanar) -> Vec<f64> {
    let hw = img.height * img.width;
    let d = img.data();
    (0..hw)
        .map(|i| {
            LUMA[0] * d[i] as f64 + LUMA[1] * d[hw + i] as f64 + LUMA[2] * d[2 * hw + i] as f64
        })
        .collect()
}

fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n / 2) as f64;
    let mut k: Vec<f64> = (0..n)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable valid-region Gaussian filtering: output (h-n+1) x (w-n+1).
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * src[y * w + x + i];
            }
            rows[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Mean local SSIM over the valid window positions of the luma planes.
pub fn ssim(a: &ImagePlanar, b: &ImagePlanar) -> Result<f64> {
    check_same_extent(a, b, "ssim")?;
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let (la, lb) = (luma(a), luma(b));
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let mu_a = filter_valid(&la, h, w, &k);
    let mu_b = filter_valid(&lb, h, w, &k);
    let aa: Vec<f64> = la.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = lb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x * y).collect();
    let e_aa = filter_valid(&aa, h, w, &k);
    let e_bb = filter_valid(&bb, h, w, &k);
    let e_ab = filter_valid(&ab, h, w, &k);
    let mut total = 0.0f64;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        total += s;
    }
    Ok(total / mu_a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::ColorState;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize, seed: u64) -> ImagePlanar {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePlanar::new(
            h,
            w,
            (0..3 * h * w).map(|_| rng.gen::<f32>()).collect(),
            ColorState::HDR,
        )
        .unwrap()
    }

    #[test]
    fn psnr_identical_is_capped_and_flagged() {
        let a = img(8, 8, 1);
        let r = psnr(&a, &a, 1.0).unwrap();
        assert!(r.identical);
        assert_eq!(r.db, PSNR_CAP_DB);
    }

    #[test]
    fn psnr_known_values() {
        let zeros = ImagePlanar::new(4, 4, vec![0.0; 48], ColorState::HDR).unwrap();
        let ones = ImagePlanar::new(4, 4, vec![1.0; 48], ColorState::HDR).unwrap();
        let r = psnr(&zeros, &ones, 1.0).unwrap();
        assert!((r.db - 0.0).abs() < 1e-12, "MSE 1 gives 0 dB, got {}", r.db);
        let half = ImagePlanar::new(4, 4, vec![0.4; 48], ColorState::HDR).unwrap();
        let offset = ImagePlanar::new(4, 4, vec![0.5; 48], ColorState::HDR).unwrap();
        let r = psnr(&half, &offset, 1.0).unwrap();
        assert!((r.db - 20.0).abs() < 1e-5, "uniform 0.1 offset gives 20 dB, got {}", r.db);
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = img(16, 16, 2);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_anticorrelated_is_negative() {
        // binary image vs its inverse
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..3 * 16 * 16)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 })
            .collect();
        let inv: Vec<f32> = data.iter().map(|v| 1.0 - v).collect();
        let a = ImagePlanar::new(16, 16, data, ColorState::HDR).unwrap();
        let b = ImagePlanar::new(16, 16, inv, ColorState::HDR).unwrap();
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        // Straight-line reference: explicit 2-D weighted sums per window.
        let a = img(32, 32, 4);
        let b = img(32, 32, 5);
        let got = ssim(&a, &b).unwrap();

        let (la, lb) = (luma(&a), luma(&b));
        let k1 = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for y0 in 0..=(32 - SSIM_WINDOW) {
            for x0 in 0..=(32 - SSIM_WINDOW) {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = k1[dy] * k1[dx];
                        let xa = la[(y0 + dy) * 32 + x0 + dx];
                        let xb = lb[(y0 + dy) * 32 + x0 + dx];
                        ma += wgt * xa;
                        mb += wgt * xb;
                        saa += wgt * xa * xa;
                        sbb += wgt * xb * xb;
                        sab += wgt * xa * xb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
        let reference = total / count as f64;
        assert!((got - reference).abs() < 1e-6, "{got} vs {reference}");
    }

    #[test]
    fn both_metrics_are_symmetric() {
        let a = img(16, 16, 6);
        let b = img(16, 16, 7);
        assert_eq!(psnr(&a, &b, 1.0).unwrap().db, psnr(&b, &a, 1.0).unwrap().db);
        let s1 = ssim(&a, &b).unwrap();
        let s2 = ssim(&b, &a).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
    }
}
