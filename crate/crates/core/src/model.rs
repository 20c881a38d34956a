//! The complete learnable model and its batched ray pipeline.
//!
//! A chunk of rays goes through piecewise sampling, two proposal rounds,
//! the radiance field and compositing. Every stage evaluates all samples of
//! the chunk in one batch so the MLPs run as matrix products.

use nalgebra::Matrix4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{DensityBatch, DensityField, FieldBatch, FieldConfig, FieldParams};
use crate::mlp::FieldError;
use crate::image_io::{BandSpec, CameraModel, SpectralImage};
use crate::rays::{generate_ray, Ray};
use crate::real::Real;
use crate::render::{composite_backward, composite_raw, compute_weights, weights_backward, CompositeCache, RenderError, RenderOutput};
use crate::sampling::{piecewise_initial_samples, resample_edges, Histogram, ProposalConfig, SampleSet, SamplingError};
use crate::training::adam::TensorKind;
use crate::training::loss::interlevel_loss_grad;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("model layout mismatch: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub field: FieldConfig,
    pub proposal: ProposalConfig,
}

impl ModelConfig {
    /// Full-size model for `band_count` bands.
    pub fn full_size(band_count: usize) -> Self {
        Self { field: FieldConfig::full_size(band_count), proposal: ProposalConfig::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.field.validate()?;
        self.proposal.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    /// World units mapped onto the unit ball before contraction.
    pub scene_scale: f64,
    pub field: FieldParams<T>,
    pub proposals: [DensityField<T>; 2],
}

/// One proposal round of a chunk.
#[derive(Debug, Clone)]
pub struct RoundState<T> {
    batch: DensityBatch<T>,
    pub sets: Vec<SampleSet>,
    pub weights: Vec<Vec<T>>,
    transmittance: Vec<Vec<T>>,
}

/// Everything a chunk forward pass produced, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ChunkForward<T> {
    pub rounds: Vec<RoundState<T>>,
    pub final_sets: Vec<SampleSet>,
    field: FieldBatch<T>,
    caches: Vec<CompositeCache<T>>,
    pub outputs: Vec<RenderOutput<T>>,
}

impl<T> ChunkForward<T> {
    pub fn histograms(&self, ray: usize) -> Vec<Histogram<T>>
    where
        T: Clone,
    {
        self.rounds
            .iter()
            .map(|r| Histogram { edges: r.sets[ray].edges().to_vec(), weights: r.weights[ray].clone() })
            .collect()
    }
}

fn deltas_of<T: Real>(set: &SampleSet) -> Vec<T> {
    set.deltas().iter().map(|d| T::lit(*d)).collect()
}

impl<T: Real> Model<T> {
    pub fn init(config: ModelConfig, scene_scale: f64, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if !(scene_scale > 0.0 && scene_scale.is_finite()) {
            return Err(ModelError::Layout(format!("scene scale {scene_scale} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = FieldParams::init(config.field, &mut rng)?;
        let proposals = config.proposal.init_fields(&mut rng)?;
        Ok(Self { config, scene_scale, field, proposals })
    }

    /// Every parameter zero.
    pub fn zeros(config: ModelConfig, scene_scale: f64) -> Result<Self, ModelError> {
        config.validate()?;
        let p = &config.proposal;
        let prop = |r: usize| DensityField::zeros(p.grid(r), p.hidden_dim, p.hidden_layers);
        Ok(Self { config, scene_scale, field: FieldParams::zeros(config.field)?, proposals: [prop(0)?, prop(1)?] })
    }

    /// Same layout, every value zero.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config, self.scene_scale).expect("layout was validated at construction")
    }

    pub fn band_count(&self) -> usize {
        self.config.field.band_count
    }

    /// Tensors in checkpoint order: base grid, base MLP, color MLP, then
    /// grid and MLP of each proposal round.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = self.field.tensors();
        for p in &self.proposals {
            out.extend(p.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.field.tensors_mut();
        for p in &mut self.proposals {
            out.extend(p.tensors_mut());
        }
        out
    }

    pub fn tensor_kinds(&self) -> Vec<TensorKind> {
        let mlp_tensors = |layers: usize| std::iter::repeat_n(TensorKind::Mlp, 2 * (layers + 1));
        let mut out = vec![TensorKind::Grid];
        out.extend(mlp_tensors(self.config.field.base_hidden_layers));
        out.extend(mlp_tensors(self.config.field.color_hidden_layers));
        for _ in 0..2 {
            out.push(TensorKind::Grid);
            out.extend(mlp_tensors(self.config.proposal.hidden_layers));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Forward pass over a chunk. `rngs` jitters the samples of each ray;
    /// without it sampling is deterministic.
    pub fn forward_chunk(
        &self,
        rays: &[Ray],
        mut rngs: Option<&mut [ChaCha8Rng]>,
    ) -> Result<ChunkForward<T>, ModelError> {
        let cfg = &self.config.proposal;
        let scale = self.scene_scale;
        let mut sets = Vec::with_capacity(rays.len());
        for (i, ray) in rays.iter().enumerate() {
            let rng = rngs.as_deref_mut().map(|r| &mut r[i]);
            sets.push(piecewise_initial_samples(ray, cfg.samples_per_round[0], scale, rng)?);
        }
        let mut rounds = Vec::with_capacity(2);
        for (round, field) in self.proposals.iter().enumerate() {
            let next = if round == 0 { cfg.samples_per_round[1] } else { cfg.final_samples };
            let positions: Vec<[f64; 3]> = sets.iter().flat_map(|s| s.positions(scale)).collect();
            let batch = field.forward_batch(&positions)?;
            let mut weights = Vec::with_capacity(rays.len());
            let mut transmittance = Vec::with_capacity(rays.len());
            let mut next_sets = Vec::with_capacity(rays.len());
            let mut offset = 0;
            for (i, set) in sets.iter().enumerate() {
                let n = set.len();
                let (w, t) = compute_weights(&batch.sigmas[offset..offset + n], &deltas_of::<T>(set));
                offset += n;
                let rng = rngs.as_deref_mut().map(|r| &mut r[i]);
                let edges = resample_edges(set.edges(), &w, next, rng);
                next_sets.push(SampleSet::from_edges_midpoints(rays[i], edges)?);
                weights.push(w);
                transmittance.push(t);
            }
            rounds.push(RoundState { batch, sets: std::mem::replace(&mut sets, next_sets), weights, transmittance });
        }
        let mut positions = Vec::with_capacity(rays.len() * cfg.final_samples);
        let mut directions = Vec::with_capacity(rays.len() * cfg.final_samples);
        for set in &sets {
            let d = set.ray.direction;
            positions.extend(set.positions(scale));
            directions.extend(std::iter::repeat_n([d.x, d.y, d.z], set.len()));
        }
        let field = self.field.forward_batch(&positions, &directions)?;
        let bands = self.band_count();
        let mut caches = Vec::with_capacity(rays.len());
        let mut outputs = Vec::with_capacity(rays.len());
        let mut offset = 0;
        for set in &sets {
            let n = set.len();
            let t: Vec<T> = set.t_values().iter().map(|v| T::lit(*v)).collect();
            let (out, cache) = composite_raw(
                &t,
                &deltas_of::<T>(set),
                &field.sigmas[offset..offset + n],
                &field.colors[offset * bands..(offset + n) * bands],
                bands,
            )?;
            offset += n;
            outputs.push(out);
            caches.push(cache);
        }
        Ok(ChunkForward { rounds, final_sets: sets, field, caches, outputs })
    }

    /// Accumulates into `grad` the gradients of the color objective
    /// (`d_color`, `rays x B`) and of `interlevel_scale` times the interlevel
    /// loss. Returns the unscaled interlevel loss summed over rays.
    pub fn backward_chunk(
        &self,
        fwd: &ChunkForward<T>,
        d_color: &[T],
        interlevel_scale: T,
        grad: &mut Model<T>,
    ) -> Result<f64, ModelError> {
        let bands = self.band_count();
        let rays = fwd.outputs.len();
        if d_color.len() != rays * bands {
            return Err(ModelError::Layout(format!(
                "color gradient holds {} values for {} rays of {} bands",
                d_color.len(),
                rays,
                bands
            )));
        }
        let mut d_sigma = Vec::with_capacity(fwd.field.rows);
        let mut d_rad = Vec::with_capacity(fwd.field.rows * bands);
        for (i, cache) in fwd.caches.iter().enumerate() {
            let (ds, dr) = composite_backward(cache, &d_color[i * bands..(i + 1) * bands], T::zero(), T::zero())?;
            d_sigma.extend(ds);
            d_rad.extend(dr);
        }
        self.field.backward_batch(&fwd.field, &d_sigma, &d_rad, &mut grad.field)?;

        let mut interlevel = 0.0;
        for (k, round) in fwd.rounds.iter().enumerate() {
            let mut d_sigma = Vec::with_capacity(round.batch.sigmas.len());
            for i in 0..rays {
                let fin = Histogram { edges: fwd.final_sets[i].edges().to_vec(), weights: fwd.outputs[i].weights.clone() };
                let prop = Histogram { edges: round.sets[i].edges().to_vec(), weights: round.weights[i].clone() };
                let (loss, g) = interlevel_loss_grad(&fin, &prop);
                interlevel += loss;
                let d_w: Vec<T> = g.into_iter().map(|v| v * interlevel_scale).collect();
                d_sigma.extend(weights_backward(
                    &deltas_of::<T>(&round.sets[i]),
                    &round.weights[i],
                    &round.transmittance[i],
                    &d_w,
                ));
            }
            if interlevel_scale != T::zero() {
                self.proposals[k].backward_batch(&round.batch, &d_sigma, &mut grad.proposals[k])?;
            }
        }
        Ok(interlevel)
    }

    /// Deterministic renders of `rays`, evaluated in parallel chunks.
    pub fn render_rays(&self, rays: &[Ray], chunk: usize) -> Result<Vec<RenderOutput<T>>, ModelError> {
        let parts: Vec<Result<Vec<RenderOutput<T>>, ModelError>> = rays
            .par_chunks(chunk.max(1))
            .map(|c| self.forward_chunk(c, None).map(|f| f.outputs))
            .collect();
        let mut out = Vec::with_capacity(rays.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Renders every pixel of a posed camera. Colors are clamped to `[0, 1]`
    /// to absorb rounding in the composite.
    pub fn render_view(
        &self,
        cam: &CameraModel,
        pose: &Matrix4<f64>,
        bands: Vec<BandSpec>,
        chunk: usize,
    ) -> Result<RenderedView, ModelError> {
        let (w, h) = (cam.width as usize, cam.height as usize);
        if bands.len() != self.band_count() {
            return Err(ModelError::Layout(format!("{} band names for a {}-band model", bands.len(), self.band_count())));
        }
        let rays: Vec<Ray> =
            (0..w * h).map(|i| generate_ray(cam, pose, (i % w) as f64, (i / w) as f64)).collect();
        let out = self.render_rays(&rays, chunk)?;
        let b = bands.len();
        let mut pixels = vec![0.0f32; b * w * h];
        let mut depth = Vec::with_capacity(w * h);
        let mut accumulation = Vec::with_capacity(w * h);
        for (i, o) in out.iter().enumerate() {
            for k in 0..b {
                pixels[k * w * h + i] = (o.color[k].as_f64() as f32).clamp(0.0, 1.0);
            }
            depth.push(o.depth.as_f64());
            accumulation.push(o.accumulation.as_f64());
        }
        let image = SpectralImage::new(w, h, bands, pixels).map_err(|e| ModelError::Layout(e.to_string()))?;
        Ok(RenderedView { image, depth, accumulation })
    }
}

/// A rendered camera view with per-pixel depth and accumulation, row-major.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub image: SpectralImage,
    pub depth: Vec<f64>,
    pub accumulation: Vec<f64>,
}

/// Per-ray random stream for sample jitter.
pub fn ray_rng(seed: u64, step: u64, ray: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(ray);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::HashGridConfig;
    use crate::rays::Vec3;

    pub(crate) fn tiny_config(bands: usize) -> ModelConfig {
        let grid = HashGridConfig { levels: 4, features_per_level: 2, log2_table_size: 10, base_resolution: 4, max_resolution: 32 };
        ModelConfig {
            field: FieldConfig {
                band_count: bands,
                grid,
                base_hidden_dim: 16,
                base_hidden_layers: 1,
                geo_feature_dim: 7,
                color_hidden_dim: 16,
                color_hidden_layers: 1,
            },
            proposal: ProposalConfig {
                samples_per_round: [16, 8],
                hash_max_resolution: [16, 32],
                hash_levels: [2, 3],
                log2_table_size: 8,
                base_resolution: 4,
                final_samples: 6,
                ..Default::default()
            },
        }
    }

    fn rays() -> Vec<Ray> {
        (0..5)
            .map(|i| Ray::new(Vec3::new(0.1 * i as f64, 0.0, 3.0), Vec3::new(0.0, 0.05, -1.0), 0.5, 6.0))
            .collect()
    }

    #[test]
    fn chunk_shapes_follow_the_config() {
        for bands in [1, 3, 6, 12] {
            let m = Model::<f32>::init(tiny_config(bands), 1.0, 3).unwrap();
            let f = m.forward_chunk(&rays(), None).unwrap();
            assert_eq!(f.outputs.len(), 5);
            assert!(f.outputs.iter().all(|o| o.color.len() == bands && o.weights.len() == 6));
            assert_eq!(f.rounds[0].sets[0].len(), 16);
            assert_eq!(f.rounds[1].sets[0].len(), 8);
            let mut g = m.zeros_like();
            let d = vec![0.1f32; 5 * bands];
            m.backward_chunk(&f, &d, 1.0, &mut g).unwrap();
            assert!(g.tensors().iter().any(|t| t.iter().any(|v| *v != 0.0)));
        }
    }

    #[test]
    fn tensor_kinds_line_up_with_tensors() {
        let m = Model::<f32>::init(tiny_config(6), 1.0, 3).unwrap();
        let kinds = m.tensor_kinds();
        let tensors = m.tensors();
        assert_eq!(kinds.len(), tensors.len());
        let grids: Vec<usize> = kinds.iter().enumerate().filter(|(_, k)| **k == TensorKind::Grid).map(|(i, _)| i).collect();
        assert_eq!(tensors[grids[0]].len(), m.field.base_grid.params().len());
        assert_eq!(tensors[grids[2]].len(), m.proposals[1].grid.params().len());
    }

    #[test]
    fn batched_render_matches_single_ray_render() {
        let m = Model::<f64>::init(tiny_config(3), 1.0, 4).unwrap();
        let all = m.render_rays(&rays(), 2).unwrap();
        for (r, o) in rays().iter().zip(&all) {
            let single = m.forward_chunk(std::slice::from_ref(r), None).unwrap();
            assert_eq!(&single.outputs[0], o);
        }
    }
}
