//! Volume-rendering quadrature and its gradient.
//!
//! `α_i = 1 − exp(−σ_i δ_i)`, `T_i = Π_{j<i} (1 − α_j)`, `w_i = T_i α_i`.
//! Color is composited onto black; depth is the weight-averaged distance.

use thiserror::Error;

use crate::real::Real;
use crate::sampling::SampleSet;

/// Floor of the accumulation in the depth normalization.
pub const DEPTH_EPS: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("invalid compositing input: {0}")]
    Domain(String),
    #[error("non-finite density: {0}")]
    NonFinite(String),
    #[error("stale cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput<T> {
    pub color: Vec<T>,
    pub depth: T,
    pub accumulation: T,
    pub weights: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct CompositeCache<T> {
    bands: usize,
    t: Vec<T>,
    deltas: Vec<T>,
    radiances: Vec<T>,
    weights: Vec<T>,
    /// `T_0 ..= T_n`; the last entry is the final transmittance.
    transmittance: Vec<T>,
    depth: T,
    accumulation: T,
}

impl<T: Real> CompositeCache<T> {
    pub fn final_transmittance(&self) -> T {
        *self.transmittance.last().unwrap()
    }
}

/// Weights and the transmittance prefix `T_0 ..= T_n`.
pub fn compute_weights<T: Real>(sigmas: &[T], deltas: &[T]) -> (Vec<T>, Vec<T>) {
    let n = sigmas.len();
    let mut weights = Vec::with_capacity(n);
    let mut trans = Vec::with_capacity(n + 1);
    let mut t_cur = T::one();
    trans.push(t_cur);
    for (s, d) in sigmas.iter().zip(deltas) {
        let od = *s * *d;
        let alpha = -(-od).exp_m1();
        weights.push(t_cur * alpha);
        t_cur = t_cur * (-od).exp();
        trans.push(t_cur);
    }
    (weights, trans)
}

/// Density gradient given the gradient on each weight.
///
/// `∂L/∂σ_k = δ_k (g_k T_{k+1} − Σ_{i>k} g_i w_i)`.
pub fn weights_backward<T: Real>(deltas: &[T], weights: &[T], trans: &[T], d_weights: &[T]) -> Vec<T> {
    let n = weights.len();
    let mut out = vec![T::zero(); n];
    let mut suffix = T::zero();
    for k in (0..n).rev() {
        out[k] = deltas[k] * (d_weights[k] * trans[k + 1] - suffix);
        suffix += d_weights[k] * weights[k];
    }
    out
}

fn check_inputs<T: Real>(deltas: &[T], sigmas: &[T]) -> Result<(), RenderError> {
    if let Some(i) = sigmas.iter().position(|s| !s.is_finite()) {
        return Err(RenderError::NonFinite(format!("density {} at sample {i}", sigmas[i])));
    }
    if let Some(i) = sigmas.iter().position(|s| !(*s >= T::zero())) {
        return Err(RenderError::Domain(format!("density {} at sample {i} is negative", sigmas[i])));
    }
    if let Some(i) = deltas.iter().position(|d| !(*d > T::zero())) {
        return Err(RenderError::Domain(format!("interval {} at sample {i} is not positive", deltas[i])));
    }
    Ok(())
}

/// Composites raw arrays: `t` sample distances, `deltas` interval lengths,
/// `radiances` row-major `n x bands`.
pub fn composite_raw<T: Real>(
    t: &[T],
    deltas: &[T],
    sigmas: &[T],
    radiances: &[T],
    bands: usize,
) -> Result<(RenderOutput<T>, CompositeCache<T>), RenderError> {
    let n = t.len();
    if deltas.len() != n || sigmas.len() != n || radiances.len() != n * bands {
        return Err(RenderError::Domain(format!(
            "length mismatch: {} samples, {} deltas, {} densities, {} radiance values for {} bands",
            n,
            deltas.len(),
            sigmas.len(),
            radiances.len(),
            bands
        )));
    }
    check_inputs(deltas, sigmas)?;
    let (weights, transmittance) = compute_weights(sigmas, deltas);
    let mut color = vec![T::zero(); bands];
    let mut accumulation = T::zero();
    let mut depth_sum = T::zero();
    for i in 0..n {
        let w = weights[i];
        accumulation += w;
        depth_sum += w * t[i];
        for (c, r) in color.iter_mut().zip(&radiances[i * bands..(i + 1) * bands]) {
            *c += w * *r;
        }
    }
    let depth = depth_sum / accumulation.max(T::lit(DEPTH_EPS));
    let cache = CompositeCache {
        bands,
        t: t.to_vec(),
        deltas: deltas.to_vec(),
        radiances: radiances.to_vec(),
        weights: weights.clone(),
        transmittance,
        depth,
        accumulation,
    };
    Ok((RenderOutput { color, depth, accumulation, weights }, cache))
}

/// Composites the samples of one ray.
pub fn composite<T: Real>(
    samples: &SampleSet,
    sigmas: &[T],
    radiances: &[T],
) -> Result<(RenderOutput<T>, CompositeCache<T>), RenderError> {
    let n = samples.len();
    if n == 0 {
        return Err(RenderError::Domain("empty sample set".into()));
    }
    let bands = radiances.len() / n;
    let t: Vec<T> = samples.t_values().iter().map(|v| T::lit(*v)).collect();
    let d: Vec<T> = samples.deltas().iter().map(|v| T::lit(*v)).collect();
    composite_raw(&t, &d, sigmas, radiances, bands)
}

/// Gradients on densities and radiances (`n x bands`) for upstream
/// gradients on color, depth and accumulation.
pub fn composite_backward<T: Real>(
    cache: &CompositeCache<T>,
    d_color: &[T],
    d_depth: T,
    d_accumulation: T,
) -> Result<(Vec<T>, Vec<T>), RenderError> {
    if d_color.len() != cache.bands {
        return Err(RenderError::Cache(format!(
            "upstream color has {} bands, cache was built for {}",
            d_color.len(),
            cache.bands
        )));
    }
    let n = cache.weights.len();
    let bands = cache.bands;
    let eps = T::lit(DEPTH_EPS);
    let mut d_w = Vec::with_capacity(n);
    let mut d_rad = vec![T::zero(); n * bands];
    for i in 0..n {
        let rad = &cache.radiances[i * bands..(i + 1) * bands];
        let mut g = d_accumulation;
        for b in 0..bands {
            g += d_color[b] * rad[b];
            d_rad[i * bands + b] = d_color[b] * cache.weights[i];
        }
        if d_depth != T::zero() {
            g += if cache.accumulation > eps {
                d_depth * (cache.t[i] - cache.depth) / cache.accumulation
            } else {
                d_depth * cache.t[i] / eps
            };
        }
        d_w.push(g);
    }
    let d_sigma = weights_backward(&cache.deltas, &cache.weights, &cache.transmittance, &d_w);
    Ok((d_sigma, d_rad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_space_renders_black() {
        let (out, _) = composite_raw(&[1.0, 2.0], &[1.0, 1.0], &[0.0, 0.0], &[0.3, 0.4, 0.5, 0.6], 2).unwrap();
        assert_eq!(out.weights, vec![0.0, 0.0]);
        assert_eq!(out.color, vec![0.0, 0.0]);
        assert_eq!(out.accumulation, 0.0);
    }

    #[test]
    fn opaque_sample_takes_all_weight() {
        let (out, _) =
            composite_raw(&[1.0, 2.0], &[1.0, 1.0], &[1e300, 0.0], &[0.3, 0.4, 0.5, 0.6], 2).unwrap();
        assert_eq!(out.weights, vec![1.0, 0.0]);
        assert_eq!(out.color, vec![0.3, 0.4]);
        assert_eq!(out.depth, 1.0);
    }

    #[test]
    fn ln2_pair_gives_half_and_quarter() {
        let ln2 = std::f64::consts::LN_2;
        let (out, _) = composite_raw(&[0.5, 1.5], &[1.0, 1.0], &[ln2, ln2], &[1.0, 1.0], 1).unwrap();
        assert_eq!(out.weights, vec![0.5, 0.25]);
        assert_eq!(out.accumulation, 0.75);
    }

    #[test]
    fn negative_density_or_interval_is_rejected() {
        assert!(matches!(
            composite_raw(&[1.0], &[1.0], &[-0.1], &[0.5], 1),
            Err(RenderError::Domain(_))
        ));
        assert!(matches!(
            composite_raw(&[1.0], &[0.0], &[0.1], &[0.5], 1),
            Err(RenderError::Domain(_))
        ));
        assert!(matches!(
            composite_raw(&[1.0], &[1.0], &[f64::NAN], &[0.5], 1),
            Err(RenderError::NonFinite(_))
        ));
    }

    #[test]
    fn band_upstream_touches_only_that_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 6;
        let t: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.3).collect();
        let d = vec![0.3; n];
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let r: Vec<f64> = (0..n * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let (_, cache) = composite_raw(&t, &d, &s, &r, 3).unwrap();
        let (ds, dr) = composite_backward(&cache, &[0.0, 1.0, 0.0], 0.0, 0.0).unwrap();
        for i in 0..n {
            assert_eq!(dr[i * 3], 0.0);
            assert_eq!(dr[i * 3 + 2], 0.0);
            assert!(dr[i * 3 + 1] > 0.0);
        }
        assert!(ds.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let (_, cache) = composite_raw(&[1.0, 2.0], &[1.0, 1.0], &[0.5, 2.0], &[0.1, 0.9], 1).unwrap();
        let (ds, dr) = composite_backward(&cache, &[0.0], 0.0, 0.0).unwrap();
        assert!(ds.iter().chain(&dr).all(|v| *v == 0.0));
        assert!(matches!(composite_backward(&cache, &[0.0, 0.0], 0.0, 0.0), Err(RenderError::Cache(_))));
    }

    #[test]
    fn splitting_a_sample_keeps_the_color() {
        let (a, _) = composite_raw::<f64>(&[1.0, 2.0], &[1.0, 1.0], &[0.7, 1.3], &[0.2, 0.8], 1).unwrap();
        let (b, _) =
            composite_raw(&[1.0, 1.75, 2.25], &[1.0, 0.5, 0.5], &[0.7, 1.3, 1.3], &[0.2, 0.8, 0.8], 1).unwrap();
        assert!((a.color[0] - b.color[0]).abs() < 1e-12);
        assert!((a.accumulation - b.accumulation).abs() < 1e-12);
    }

    #[test]
    fn permuting_bands_permutes_color() {
        let r = [0.1, 0.5, 0.9, 0.3, 0.2, 0.7];
        let rp = [0.9, 0.1, 0.5, 0.7, 0.3, 0.2];
        let (a, _) = composite_raw(&[1.0, 2.0], &[1.0, 1.0], &[0.4, 0.9], &r, 3).unwrap();
        let (b, _) = composite_raw(&[1.0, 2.0], &[1.0, 1.0], &[0.4, 0.9], &rp, 3).unwrap();
        assert_eq!([a.color[2], a.color[0], a.color[1]], [b.color[0], b.color[1], b.color[2]]);
    }
}
