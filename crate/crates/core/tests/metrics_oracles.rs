use msnerf::image_io::{default_bands, SpectralImage};
use msnerf::metrics::{
    evaluate, lpips_hook, psnr, psnr_from_mse, ssim, ssim_band, MetricError, PerceptualBackend, SsimParams,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(w: usize, h: usize, bands: usize, seed: u64) -> SpectralImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Smooth structure plus noise, inside [0.32, 0.68].
    let px = (0..w * h * bands)
        .map(|k| {
            let (x, y) = ((k % w) as f32, ((k / w) % h) as f32);
            0.5 + 0.12 * (0.3 * x + 0.2 * y + k as f32 / (w * h) as f32).sin() + rng.random_range(-0.06f32..0.06)
        })
        .collect();
    SpectralImage::new(w, h, default_bands(bands), px).unwrap()
}

fn map(img: &SpectralImage, f: impl Fn(f32) -> f32) -> SpectralImage {
    SpectralImage::new(img.width(), img.height(), img.bands().to_vec(), img.pixels().iter().map(|v| f(*v)).collect())
        .unwrap()
}

/// SSIM with a direct 2-D Gaussian window and the two-factor form.
fn brute_force_ssim(a: &[f32], b: &[f32], w: usize, h: usize, p: &SsimParams) -> f64 {
    let k = p.window;
    let r = (k / 2) as f64;
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let d2 = (i as f64 - r).powi(2) + (j as f64 - r).powi(2);
            win[i * k + j] = (-d2 / (2.0 * p.sigma * p.sigma)).exp();
        }
    }
    let s: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (p.c1(), p.c2());
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let g = win[i * k + j];
                    let (u, v) = (a[(y0 + i) * w + x0 + j] as f64, b[(y0 + i) * w + x0 + j] as f64);
                    mx += g * u;
                    my += g * v;
                    sxx += g * u * u;
                    syy += g * v * v;
                    sxy += g * u * v;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn psnr_closed_forms() {
    assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
    assert_eq!(psnr_from_mse(1.0, 1.0), 0.0);
    assert!((psnr_from_mse(0.01, 255.0) - (20.0 + 20.0 * 255f64.log10())).abs() < 1e-12);
    assert_eq!(psnr_from_mse(0.0, 1.0), f64::INFINITY);
}

#[test]
fn psnr_of_a_uniform_offset() {
    let a = SpectralImage::filled(8, 8, default_bands(6), 0.5).unwrap();
    let b = SpectralImage::filled(8, 8, default_bands(6), 0.75).unwrap();
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0 * 4f64.log10()).abs() < 1e-12);
}

#[test]
fn psnr_falls_as_noise_grows() {
    let a = random_image(32, 32, 6, 1);
    let mut last = f64::INFINITY;
    for amp in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<f32> = (0..a.pixels().len()).map(|_| if rng.random_bool(0.5) { amp } else { -amp }).collect();
        let b = SpectralImage::new(32, 32, default_bands(6), a.pixels().iter().zip(&noise).map(|(p, n)| p + n).collect())
            .unwrap();
        let v = psnr(&a, &b, 1.0).unwrap();
        assert!(v < last);
        last = v;
    }
}

#[test]
fn ssim_equals_direct_window_evaluation() {
    let p = SsimParams::default();
    for seed in 0..5 {
        let a = random_image(23, 19, 1, seed);
        let b = random_image(23, 19, 1, seed + 50);
        let got = ssim_band(a.band(0), b.band(0), 23, 19, &p).unwrap();
        assert!((got - brute_force_ssim(a.band(0), b.band(0), 23, 19, &p)).abs() < 1e-10);
    }
}

#[test]
fn constant_shift_leaves_only_the_luminance_term() {
    let p = SsimParams::default();
    for (mu, delta) in [(0.25f32, 0.5f32), (0.5, 0.125), (0.0, 1.0)] {
        let a = SpectralImage::filled(16, 16, default_bands(6), mu).unwrap();
        let b = map(&a, |v| v + delta);
        let (m, d, c1) = (mu as f64, delta as f64, p.c1());
        let expect = (2.0 * m * (m + d) + c1) / (m * m + (m + d) * (m + d) + c1);
        assert!((ssim(&a, &b, &p).unwrap() - expect).abs() < 1e-12);
    }
}

#[test]
fn shifted_texture_keeps_contrast_and_structure() {
    let p = SsimParams::default();
    let a = random_image(20, 20, 1, 3);
    let b = map(&a, |v| v + 0.25);
    // Contrast and structure are 1, so SSIM is the window mean of the luminance term.
    let lum_only = |x: &[f32]| {
        let mut acc = 0.0;
        let mut n = 0;
        let taps = p.taps();
        for y0 in 0..=20 - 11 {
            for x0 in 0..=20 - 11 {
                let mut mx = 0.0;
                for i in 0..11 {
                    for j in 0..11 {
                        mx += taps[i] * taps[j] * x[(y0 + i) * 20 + x0 + j] as f64;
                    }
                }
                let my = mx + 0.25;
                acc += (2.0 * mx * my + p.c1()) / (mx * mx + my * my + p.c1());
                n += 1;
            }
        }
        acc / n as f64
    };
    let got = ssim_band(a.band(0), b.band(0), 20, 20, &p).unwrap();
    assert!((got - lum_only(a.band(0))).abs() < 1e-6);
}

#[test]
fn anticorrelated_images_score_below_zero() {
    let a = random_image(24, 24, 3, 8);
    let b = map(&a, |v| 1.0 - v);
    assert!(ssim(&a, &b, &SsimParams::default()).unwrap() < 0.0);
}

#[test]
fn window_larger_than_image_is_shape_error() {
    let a = SpectralImage::filled(8, 8, default_bands(1), 0.5).unwrap();
    assert!(matches!(ssim(&a, &a, &SsimParams::default()), Err(MetricError::Shape(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_of_identical_images_is_one(seed in any::<u64>(), bands in 1usize..7) {
        let a = random_image(16, 14, bands, seed);
        prop_assert!((ssim(&a, &a, &SsimParams::default()).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn ssim_is_symmetric(seed in any::<u64>(), bands in 1usize..7) {
        let a = random_image(16, 14, bands, seed);
        let b = random_image(16, 14, bands, seed ^ 0xabc);
        let p = SsimParams::default();
        prop_assert!((ssim(&a, &b, &p).unwrap() - ssim(&b, &a, &p).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn ssim_is_at_most_one(seed in any::<u64>()) {
        let a = random_image(16, 16, 2, seed);
        let b = random_image(16, 16, 2, seed.wrapping_add(1));
        prop_assert!(ssim(&a, &b, &SsimParams::default()).unwrap() <= 1.0 + 1e-12);
    }
}

struct MeanAbs;

impl PerceptualBackend for MeanAbs {
    fn name(&self) -> &str {
        "mean-abs"
    }

    fn score(&self, a: &SpectralImage, b: &SpectralImage) -> Result<f64, MetricError> {
        Ok(a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.pixels().len() as f64)
    }
}

struct Failing;

impl PerceptualBackend for Failing {
    fn name(&self) -> &str {
        "failing"
    }

    fn score(&self, _: &SpectralImage, _: &SpectralImage) -> Result<f64, MetricError> {
        Err(MetricError::Backend("model weights missing".into()))
    }
}

#[test]
fn perceptual_hook_only_reports_a_real_backend() {
    let a = SpectralImage::filled(12, 12, default_bands(6), 0.5).unwrap();
    let b = SpectralImage::filled(12, 12, default_bands(6), 0.625).unwrap();
    assert_eq!(lpips_hook(&a, &b, None).unwrap(), None);
    assert_eq!(lpips_hook(&a, &b, Some(&MeanAbs)).unwrap(), Some(0.125));
    assert!(matches!(lpips_hook(&a, &b, Some(&Failing)), Err(MetricError::Backend(_))));
    let report = evaluate(&a, &b, 1.0, &SsimParams::default(), None).unwrap();
    let json = serde_json::to_value(&report).unwrap();
    assert!(json.get("lpips").is_none());
    assert_eq!(json["per_band"].as_array().unwrap().len(), 6);
}

#[test]
fn identical_images_report_infinite_psnr_as_text() {
    let a = random_image(12, 12, 6, 2);
    let report = evaluate(&a, &a, 1.0, &SsimParams::default(), None).unwrap();
    let json = serde_json::to_value(&report).unwrap();
    assert_eq!(json["psnr_db"], "inf");
    assert_eq!(json["per_band"][0]["psnr_db"], "inf");
}
