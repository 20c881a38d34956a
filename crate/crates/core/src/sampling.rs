//! Ray sampling: the piecewise initial sampler, inverse-CDF resampling and
//! the two-round proposal hierarchy.
//!
//! A `SampleSet` is a partition of `[near, far]` into bins. Each bin holds one
//! sample distance; `deltas` are the bin widths used by the quadrature.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::HashGridConfig;
use crate::field::DensityField;
use crate::mlp::FieldError;
use crate::rays::{world_to_grid, Ray};
use crate::real::Real;
use crate::render::compute_weights;

/// Total padding mass added to a histogram before inversion.
pub const HISTOGRAM_PADDING: f64 = 0.01;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("invalid ray: {0}")]
    Ray(String),
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub ray: Ray,
    edges: Vec<f64>,
    t_values: Vec<f64>,
    deltas: Vec<f64>,
}

impl SampleSet {
    /// Builds a set from strictly increasing bin edges with one sample per bin.
    pub fn from_edges(ray: Ray, edges: Vec<f64>, t_values: Vec<f64>) -> Result<Self, SamplingError> {
        if edges.len() < 2 || t_values.len() + 1 != edges.len() {
            return Err(SamplingError::Ray(format!(
                "{} edges cannot hold {} samples",
                edges.len(),
                t_values.len()
            )));
        }
        let deltas: Vec<f64> = edges.windows(2).map(|w| w[1] - w[0]).collect();
        if deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(SamplingError::Ray("bin edges are not strictly increasing".into()));
        }
        for (i, t) in t_values.iter().enumerate() {
            if !(edges[i] <= *t && *t <= edges[i + 1]) {
                return Err(SamplingError::Ray(format!("sample {t} lies outside its bin {i}")));
            }
        }
        Ok(Self { ray, edges, t_values, deltas })
    }

    /// Samples at the bin midpoints.
    pub fn from_edges_midpoints(ray: Ray, edges: Vec<f64>) -> Result<Self, SamplingError> {
        let t = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Self::from_edges(ray, edges, t)
    }

    pub fn len(&self) -> usize {
        self.t_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_values.is_empty()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn t_values(&self) -> &[f64] {
        &self.t_values
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    /// Contracted sample positions rescaled into the unit cube.
    pub fn positions(&self, scene_scale: f64) -> Vec<[f64; 3]> {
        self.t_values.iter().map(|t| world_to_grid(self.ray.at(*t), scene_scale)).collect()
    }
}

/// Bin edges and weights of one sampling round, kept for the interlevel loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram<T> {
    pub edges: Vec<f64>,
    pub weights: Vec<T>,
}

fn check_ray(ray: &Ray) -> Result<(), SamplingError> {
    if !(ray.near.is_finite() && ray.far.is_finite() && ray.near >= 0.0 && ray.far > ray.near) {
        return Err(SamplingError::Ray(format!("need 0 <= near < far, got [{}, {}]", ray.near, ray.far)));
    }
    Ok(())
}

/// Half the samples uniform in `t` over `[near, s]`, half uniform in
/// disparity over `[s, far]`, with `s = min(near + scene_scale, far)`.
///
/// With `rng` the sample inside each bin is jittered; without it the sample
/// is the bin midpoint (in `t` or in disparity).
pub fn piecewise_initial_samples<R: Rng + ?Sized>(
    ray: &Ray,
    n: usize,
    scene_scale: f64,
    mut rng: Option<&mut R>,
) -> Result<SampleSet, SamplingError> {
    check_ray(ray)?;
    if n < 2 || n % 2 != 0 {
        return Err(SamplingError::Config(format!("initial sample count must be even and >= 2, got {n}")));
    }
    if !(scene_scale > 0.0) {
        return Err(SamplingError::Config(format!("scene scale {scene_scale} must be positive")));
    }
    let (near, far) = (ray.near, ray.far);
    let split = (near + scene_scale).min(far);
    // When the split reaches `far` there is no disparity segment and every
    // bin is uniform over `[near, far]`.
    let half = if split < far { n / 2 } else { n };
    let frac = |rng: &mut Option<&mut R>| match rng {
        Some(r) => r.random::<f64>(),
        None => 0.5,
    };
    let lin_step = (split - near) / half as f64;
    let lin = |i: usize| if i == 0 { near } else if i == half { split } else { near + lin_step * i as f64 };
    let mut edges: Vec<f64> = (0..half).map(lin).collect();
    let mut t = Vec::with_capacity(n);
    for i in 0..half {
        let (lo, hi) = (lin(i), lin(i + 1));
        t.push(lo + (hi - lo) * frac(&mut rng));
    }
    if half < n {
        let outer = n - half;
        let (d0, d1) = (1.0 / split, 1.0 / far);
        let disp_step = (d0 - d1) / outer as f64;
        let disp = |i: usize| if i == 0 { d0 } else if i == outer { d1 } else { d0 - disp_step * i as f64 };
        edges.extend((0..outer).map(|i| if i == 0 { split } else { 1.0 / disp(i) }));
        edges.push(far);
        for i in 0..outer {
            let (a, b) = (disp(i), disp(i + 1));
            let d = a + (b - a) * frac(&mut rng);
            t.push((1.0 / d).clamp(edges[half + i], edges[half + i + 1]));
        }
    } else {
        edges.push(far);
    }
    SampleSet::from_edges(*ray, edges, t)
}

/// Stratified inverse-CDF resampling of a piecewise-constant histogram.
///
/// `edges` has one more entry than `weights`. Every interval receives an
/// extra `0.01 / intervals` mass before normalization. Returns `m` sorted
/// distances at quantiles `(k + ξ_k) / m`, with `ξ_k = 0.5` when `rng` is
/// `None`. A histogram with zero total weight resamples uniformly in `t`.
pub fn pdf_resample<T: Real, R: Rng + ?Sized>(
    edges: &[f64],
    weights: &[T],
    m: usize,
    mut rng: Option<&mut R>,
) -> Vec<f64> {
    assert_eq!(edges.len(), weights.len() + 1, "histogram needs one more edge than weights");
    let k = weights.len();
    let total: f64 = weights.iter().map(|w| w.as_f64().max(0.0)).sum();
    let quantiles: Vec<f64> = (0..m)
        .map(|i| {
            let xi = match rng.as_deref_mut() {
                Some(r) => r.random::<f64>(),
                None => 0.5,
            };
            (i as f64 + xi) / m as f64
        })
        .collect();
    let (t0, t1) = (edges[0], edges[k]);
    if total == 0.0 {
        return quantiles.iter().map(|u| t0 + (t1 - t0) * u).collect();
    }
    let cdf = padded_cdf(weights);
    quantiles.iter().map(|u| invert_cdf(edges, &cdf, *u)).collect()
}

/// Normalized cumulative mass at each edge of the padded histogram.
pub fn padded_cdf<T: Real>(weights: &[T]) -> Vec<f64> {
    let eps = HISTOGRAM_PADDING / weights.len() as f64;
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    let mut acc = 0.0;
    cdf.push(0.0);
    for w in weights {
        acc += w.as_f64().max(0.0) + eps;
        cdf.push(acc);
    }
    for c in cdf.iter_mut() {
        *c /= acc;
    }
    cdf
}

/// Generalized inverse of a piecewise-linear CDF: the interval is the last
/// `j` with `cdf[j] <= u`, capped at the final interval.
pub fn invert_cdf(edges: &[f64], cdf: &[f64], u: f64) -> f64 {
    let k = cdf.len() - 1;
    let j = (cdf.partition_point(|c| *c <= u).max(1) - 1).min(k - 1);
    let span = cdf[j + 1] - cdf[j];
    let frac = ((u - cdf[j]) / span).clamp(0.0, 1.0);
    edges[j] + frac * (edges[j + 1] - edges[j])
}

/// Resampled bin edges for a new `SampleSet` of `n` samples: `n + 1`
/// quantiles, forced strictly increasing and kept inside the old support.
pub fn resample_edges<T: Real, R: Rng + ?Sized>(
    edges: &[f64],
    weights: &[T],
    n: usize,
    rng: Option<&mut R>,
) -> Vec<f64> {
    let mut out = pdf_resample(edges, weights, n + 1, rng);
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    out[0] = lo;
    out[n] = hi;
    for i in 1..=n {
        if out[i] <= out[i - 1] {
            out[i] = out[i - 1].next_up();
        }
    }
    // Walk back from the end if nudging pushed past the support.
    for i in (1..=n).rev() {
        if out[i] > hi {
            out[i] = hi;
        }
        if out[i - 1] >= out[i] {
            out[i - 1] = out[i].next_down();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub samples_per_round: [usize; 2],
    pub hash_max_resolution: [u32; 2],
    pub hash_levels: [usize; 2],
    pub log2_table_size: u32,
    pub features_per_level: usize,
    pub base_resolution: u32,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub final_samples: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            samples_per_round: [512, 256],
            hash_max_resolution: [512, 1024],
            hash_levels: [5, 7],
            log2_table_size: 17,
            features_per_level: 2,
            base_resolution: 16,
            hidden_dim: 16,
            hidden_layers: 1,
            final_samples: 48,
        }
    }
}

impl ProposalConfig {
    pub fn grid(&self, round: usize) -> HashGridConfig {
        HashGridConfig {
            levels: self.hash_levels[round],
            features_per_level: self.features_per_level,
            log2_table_size: self.log2_table_size,
            base_resolution: self.base_resolution,
            max_resolution: self.hash_max_resolution[round],
        }
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        let [a, b] = self.samples_per_round;
        if a < 2 || a % 2 != 0 || b == 0 || self.final_samples == 0 {
            return Err(SamplingError::Config(format!(
                "sample counts ({a}, {b}, {}) must be positive with an even first round",
                self.final_samples
            )));
        }
        if b > a || self.final_samples > b {
            return Err(SamplingError::Config(format!(
                "sample counts ({a}, {b}, {}) must not increase across rounds",
                self.final_samples
            )));
        }
        for r in 0..2 {
            self.grid(r).validate().map_err(|e| SamplingError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn init_fields<T: Real, R: Rng>(&self, rng: &mut R) -> Result<[DensityField<T>; 2], SamplingError> {
        self.validate()?;
        let p0 = DensityField::init(self.grid(0), self.hidden_dim, self.hidden_layers, rng)?;
        let p1 = DensityField::init(self.grid(1), self.hidden_dim, self.hidden_layers, rng)?;
        Ok([p0, p1])
    }
}

/// Densities of a proposal field at the samples of `set`.
pub fn proposal_density_eval<T: Real>(
    field: &DensityField<T>,
    set: &SampleSet,
    scene_scale: f64,
) -> Result<Vec<T>, SamplingError> {
    Ok(field.forward_batch(&set.positions(scene_scale))?.sigmas)
}

#[derive(Debug, Clone)]
pub struct HierarchicalSamples<T> {
    pub samples: SampleSet,
    pub histograms: Vec<Histogram<T>>,
}

/// Piecewise samples, then one proposal evaluation and resampling per round.
pub fn hierarchical_sample<T: Real, R: Rng + ?Sized>(
    ray: &Ray,
    scene_scale: f64,
    cfg: &ProposalConfig,
    proposals: &[DensityField<T>; 2],
    mut rng: Option<&mut R>,
) -> Result<HierarchicalSamples<T>, SamplingError> {
    let mut set = piecewise_initial_samples(ray, cfg.samples_per_round[0], scene_scale, rng.as_deref_mut())?;
    let mut histograms = Vec::with_capacity(2);
    for (round, field) in proposals.iter().enumerate() {
        let sigmas = proposal_density_eval(field, &set, scene_scale)?;
        let deltas: Vec<T> = set.deltas().iter().map(|d| T::lit(*d)).collect();
        let (weights, _) = compute_weights(&sigmas, &deltas);
        let next = if round + 1 < proposals.len() { cfg.samples_per_round[round + 1] } else { cfg.final_samples };
        let edges = resample_edges(set.edges(), &weights, next, rng.as_deref_mut());
        histograms.push(Histogram { edges: set.edges().to_vec(), weights });
        set = SampleSet::from_edges_midpoints(*ray, edges)?;
    }
    Ok(HierarchicalSamples { samples: set, histograms })
}
