//! Image-quality metrics over all bands of a spectral image.

use rayon::prelude::*;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::image_io::SpectralImage;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid metric parameter: {0}")]
    Param(String),
    #[error("metric backend failed: {0}")]
    Backend(String),
}

/// Structural-similarity constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub window: usize,
    pub sigma: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { k1: 0.01, k2: 0.03, dynamic_range: 1.0, window: 11, sigma: 1.5 }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> =
            (0..self.window).map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    fn validate(&self) -> Result<(), MetricError> {
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0 && self.sigma > 0.0) || self.window == 0 {
            return Err(MetricError::Param(format!("{self:?}")));
        }
        Ok(())
    }
}

fn check_pair(a: &SpectralImage, b: &SpectralImage) -> Result<(), MetricError> {
    if !a.same_shape(b) {
        return Err(MetricError::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.band_count(),
            a.height(),
            a.width(),
            b.band_count(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn sq_err(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

/// Mean squared difference over every pixel of every band.
pub fn mse(a: &SpectralImage, b: &SpectralImage) -> Result<f64, MetricError> {
    check_pair(a, b)?;
    Ok(sq_err(a.pixels(), b.pixels()) / a.pixels().len() as f64)
}

/// Per-band mean squared difference.
pub fn mse_per_band(a: &SpectralImage, b: &SpectralImage) -> Result<Vec<f64>, MetricError> {
    check_pair(a, b)?;
    Ok((0..a.band_count()).map(|k| sq_err(a.band(k), b.band(k)) / a.pixel_count() as f64).collect())
}

/// `20 log10(max / sqrt(mse))`; infinite for a zero error.
pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (max_value / mse.sqrt()).log10()
    }
}

/// PSNR with the error pooled across bands.
pub fn psnr(a: &SpectralImage, b: &SpectralImage, max_value: f64) -> Result<f64, MetricError> {
    if !(max_value > 0.0) {
        return Err(MetricError::Param(format!("max value must be positive, got {max_value}")));
    }
    Ok(psnr_from_mse(mse(a, b)?, max_value))
}

/// Separable weighted sums of every full window position.
fn filter_valid(img: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM of one band.
pub fn ssim_band(a: &[f32], b: &[f32], width: usize, height: usize, p: &SsimParams) -> Result<f64, MetricError> {
    p.validate()?;
    if width < p.window || height < p.window {
        return Err(MetricError::Shape(format!(
            "{width}x{height} image is smaller than the {0}x{0} window",
            p.window
        )));
    }
    if a.len() != width * height || b.len() != a.len() {
        return Err(MetricError::Shape("band buffers do not match the image size".into()));
    }
    let taps = p.taps();
    let x: Vec<f64> = a.iter().map(|v| *v as f64).collect();
    let y: Vec<f64> = b.iter().map(|v| *v as f64).collect();
    let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(p, q)| p * q).collect() };
    let mx = filter_valid(&x, width, height, &taps);
    let my = filter_valid(&y, width, height, &taps);
    let mxx = filter_valid(&prod(&x, &x), width, height, &taps);
    let myy = filter_valid(&prod(&y, &y), width, height, &taps);
    let mxy = filter_valid(&prod(&x, &y), width, height, &taps);
    let (c1, c2, c3) = (p.c1(), p.c2(), p.c3());
    let mut sum = 0.0;
    for i in 0..mx.len() {
        let vx = (mxx[i] - mx[i] * mx[i]).max(0.0);
        let vy = (myy[i] - my[i] * my[i]).max(0.0);
        let cov = mxy[i] - mx[i] * my[i];
        let (sx, sy) = (vx.sqrt(), vy.sqrt());
        let l = (2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
        let c = (2.0 * sx * sy + c2) / (vx + vy + c2);
        let s = (cov + c3) / (sx * sy + c3);
        sum += l * c * s;
    }
    Ok(sum / mx.len() as f64)
}

/// Per-band SSIM.
pub fn ssim_per_band(a: &SpectralImage, b: &SpectralImage, p: &SsimParams) -> Result<Vec<f64>, MetricError> {
    check_pair(a, b)?;
    (0..a.band_count())
        .into_par_iter()
        .map(|k| ssim_band(a.band(k), b.band(k), a.width(), a.height(), p))
        .collect()
}

/// SSIM averaged over bands with equal weight.
pub fn ssim(a: &SpectralImage, b: &SpectralImage, p: &SsimParams) -> Result<f64, MetricError> {
    let v = ssim_per_band(a, b, p)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// External perceptual scorer. None ships with the crate.
pub trait PerceptualBackend: Sync {
    fn name(&self) -> &str;
    fn score(&self, a: &SpectralImage, b: &SpectralImage) -> Result<f64, MetricError>;
}

/// Score from `backend` if one is given; never a substitute value.
pub fn lpips_hook(
    a: &SpectralImage,
    b: &SpectralImage,
    backend: Option<&dyn PerceptualBackend>,
) -> Result<Option<f64>, MetricError> {
    check_pair(a, b)?;
    backend.map(|be| be.score(a, b)).transpose()
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandMetrics {
    pub band: String,
    pub mse: f64,
    #[serde(serialize_with = "ser_db")]
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub mse: f64,
    #[serde(serialize_with = "ser_db")]
    pub psnr_db: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
    pub per_band: Vec<BandMetrics>,
}

/// All metrics for one rendered/reference pair.
pub fn evaluate(
    pred: &SpectralImage,
    truth: &SpectralImage,
    max_value: f64,
    p: &SsimParams,
    backend: Option<&dyn PerceptualBackend>,
) -> Result<MetricReport, MetricError> {
    let per_mse = mse_per_band(pred, truth)?;
    let per_ssim = ssim_per_band(pred, truth, p)?;
    let total = mse(pred, truth)?;
    let per_band = truth
        .bands()
        .iter()
        .zip(per_mse.iter().zip(&per_ssim))
        .map(|(spec, (m, s))| BandMetrics {
            band: spec.name.clone(),
            mse: *m,
            psnr_db: psnr_from_mse(*m, max_value),
            ssim: *s,
        })
        .collect();
    Ok(MetricReport {
        mse: total,
        psnr_db: psnr(pred, truth, max_value)?,
        ssim: per_ssim.iter().sum::<f64>() / per_ssim.len() as f64,
        lpips: lpips_hook(pred, truth, backend)?,
        per_band,
    })
}
