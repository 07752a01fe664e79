//! PSNR and SSIM on 8-bit quantised planes, and benchmark evaluation.
//!
//! SSIM uses the usual constants: an 11×11 Gaussian window with σ = 1.5,
//! `K1 = 0.01`, `K2 = 0.03` and a dynamic range of 255, evaluated only where
//! the window fits inside the image.

mod eval;

pub use eval::{
    evaluate_dataset, score_prediction, EvalReport, EvalRow, EvalSummary, Predictor, SkippedFile,
};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imaging::ImagePlane;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const PEAK: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QualityScore {
    /// Decibels; `f64::INFINITY` for identical planes.
    pub psnr: f64,
    pub ssim: f64,
}

fn quantized_f64(p: &ImagePlane) -> Vec<f64> {
    p.quantized().into_iter().map(f64::from).collect()
}

/// `10·log10(255² / MSE)` over 8-bit quantised samples.
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    a.ensure_same_dims(b, "psnr")?;
    let (qa, qb) = (a.quantized(), b.quantized());
    let sse: u64 = qa
        .iter()
        .zip(&qb)
        .map(|(&x, &y)| {
            let d = x.abs_diff(y) as u64;
            d * d
        })
        .sum();
    if sse == 0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse as f64 / qa.len() as f64;
    Ok(10.0 * (PEAK * PEAK / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(src: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let s = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = g.iter().zip(&s[x..]).map(|(k, v)| k * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g
                .iter()
                .enumerate()
                .map(|(k, gk)| gk * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean structural similarity over all 11×11 window positions.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    a.ensure_same_dims(b, "ssim")?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let g = gaussian_window();
    let (qa, qb) = (quantized_f64(a), quantized_f64(b));
    let product =
        |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&qa, w, h, &g);
    let mu_b = filter_valid(&qb, w, h, &g);
    let e_aa = filter_valid(&product(&qa, &qa), w, h, &g);
    let e_bb = filter_valid(&product(&qb, &qb), w, h, &g);
    let e_ab = filter_valid(&product(&qa, &qb), w, h, &g);

    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    Ok((total / mu_a.len() as f64).clamp(-1.0, 1.0))
}

pub fn quality(a: &ImagePlane, b: &ImagePlane) -> Result<QualityScore> {
    Ok(QualityScore {
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn levels(w: usize, h: usize, f: impl Fn(usize, usize) -> i32) -> ImagePlane {
        ImagePlane::from_fn(w, h, |x, y| f(x, y).clamp(0, 255) as f64 / 255.0).unwrap()
    }

    fn textured(seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<i32> = (0..48 * 48).map(|_| rng.gen_range(-20..=20)).collect();
        levels(48, 48, |x, y| {
            let base = 128.0 + 50.0 * ((x as f64) * 0.4).sin() * ((y as f64) * 0.25).cos();
            base as i32 + noise[y * 48 + x]
        })
    }

    /// Plain per-window SSIM straight from the definition, no separability.
    fn reference_ssim(a: &ImagePlane, b: &ImagePlane) -> f64 {
        let (w, h) = a.dims();
        let (qa, qb) = (quantized_f64(a), quantized_f64(b));
        let mut kernel = [[0.0; 11]; 11];
        let mut norm = 0.0;
        for (i, row) in kernel.iter_mut().enumerate() {
            for (j, k) in row.iter_mut().enumerate() {
                let r2 = ((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
                *k = (-r2).exp();
                norm += *k;
            }
        }
        let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
        let mut acc = 0.0;
        let mut n = 0.0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = kernel[i][j] / norm;
                        ma += k * qa[(y + i) * w + x + j];
                        mb += k * qb[(y + i) * w + x + j];
                    }
                }
                let (mut va, mut vb, mut cv) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = kernel[i][j] / norm;
                        let (da, db) = (qa[(y + i) * w + x + j] - ma, qb[(y + i) * w + x + j] - mb);
                        va += k * da * da;
                        vb += k * db * db;
                        cv += k * da * db;
                    }
                }
                acc += (2.0 * ma * mb + c1) * (2.0 * cv + c2)
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1.0;
            }
        }
        acc / n
    }

    #[test]
    fn psnr_closed_forms() {
        let a = levels(16, 16, |x, y| ((x * 13 + y * 7) % 200) as i32 + 20);
        let b = levels(16, 16, |x, y| ((x * 13 + y * 7) % 200) as i32 + 21);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let one_level = psnr(&a, &b).unwrap();
        assert!((one_level - 48.1308).abs() < 1e-3, "{one_level}");
        assert!((one_level - 20.0 * 255f64.log10()).abs() < 1e-12);
        let black = levels(8, 8, |_, _| 0);
        let white = levels(8, 8, |_, _| 255);
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = levels(32, 32, |_, _| 128);
        let mut last = f64::INFINITY;
        for amp in 1..=64 {
            let noisy = levels(32, 32, |x, y| {
                128 + if (x + y) % 2 == 0 { amp } else { -amp }
            });
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let a = ImagePlane::filled(12, 12, 0.5).unwrap();
        let b = ImagePlane::filled(12, 13, 0.5).unwrap();
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
        let small = ImagePlane::filled(10, 20, 0.5).unwrap();
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn ssim_of_identical_planes_is_one() {
        let a = textured(1);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let c = ImagePlane::filled(11, 11, 0.3).unwrap();
        assert_eq!(ssim(&c, &c).unwrap(), 1.0);
    }

    #[test]
    fn ssim_matches_direct_window_evaluation() {
        let a = textured(2);
        let b = textured(3);
        let fast = ssim(&a, &b).unwrap();
        let slow = reference_ssim(&a, &b);
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }

    #[test]
    fn inverted_image_has_low_ssim() {
        let a = textured(4);
        let inv = ImagePlane::from_fn(48, 48, |x, y| 1.0 - a.get(x, y)).unwrap();
        let s = ssim(&a, &inv).unwrap();
        assert!(s < 0.5, "{s}");
        assert!((s - reference_ssim(&a, &inv)).abs() < 1e-9);
    }

    #[test]
    fn constant_planes_reduce_to_luminance_term() {
        let a = levels(20, 20, |_, _| 100);
        let b = levels(20, 20, |_, _| 110);
        let c1 = (0.01f64 * 255.0).powi(2);
        let expected = (2.0 * 100.0 * 110.0 + c1) / (100.0f64.powi(2) + 110.0f64.powi(2) + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn metrics_are_symmetric_and_bounded(seed in any::<u64>(), amp in 1i32..60) {
            let a = textured(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let offsets: Vec<i32> = (0..48 * 48).map(|_| rng.gen_range(-amp..=amp)).collect();
            let b = ImagePlane::from_fn(48, 48, |x, y| {
                ((a.get(x, y) * 255.0).round() as i32 + offsets[y * 48 + x]).clamp(0, 255) as f64 / 255.0
            }).unwrap();
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert!((s1 - s2).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s1));
            prop_assert_eq!(ssim(&b, &b).unwrap(), 1.0);
        }
    }
}
