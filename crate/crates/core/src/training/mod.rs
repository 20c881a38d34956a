//! Optimization: loss, optimizer, ray-pool scheduling, checkpoints and the
//! memory estimators.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod memory;
pub mod scheduler;

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ray_rng, Model, ModelError};
use crate::rays::Ray;
use crate::real::Real;
use crate::render::RenderError;

pub use adam::{Adam, AdamConfig, TensorKind};
pub use loss::{interlevel_loss, interlevel_loss_grad, spectral_mse_loss};
pub use scheduler::{BatchScheduler, RayBatch, TrainView};

/// Ray batches are multiples of this many rays.
pub const RAY_BATCH_QUANTUM: usize = 128;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rays_per_train_batch: usize,
    pub rays_per_eval_batch: usize,
    /// Images whose rays form the pool; `None` uses every image.
    pub images_per_pool: Option<usize>,
    /// Batches between pool rebuilds; `None` never rebuilds.
    pub pool_refresh_interval: Option<usize>,
    pub max_steps: u64,
    pub grid_lr: f64,
    pub mlp_lr: f64,
    pub interlevel_weight: f64,
    pub seed: u64,
    /// Disables sample jitter and fixes the gradient reduction layout.
    pub deterministic: bool,
    /// Gradient partitions in deterministic mode.
    pub gradient_shards: usize,
    /// Rays evaluated together inside a partition.
    pub chunk_rays: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rays_per_train_batch: 32_768,
            rays_per_eval_batch: 16_384,
            images_per_pool: None,
            pool_refresh_interval: None,
            max_steps: 30_000,
            grid_lr: 1e-2,
            mlp_lr: 1e-3,
            interlevel_weight: 1.0,
            seed: 0,
            deterministic: false,
            gradient_shards: 8,
            chunk_rays: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, v) in [("training", self.rays_per_train_batch), ("evaluation", self.rays_per_eval_batch)] {
            if v == 0 || v % RAY_BATCH_QUANTUM != 0 {
                return Err(TrainError::Config(format!(
                    "{name} rays per batch is {v}, must be a positive multiple of {RAY_BATCH_QUANTUM}"
                )));
            }
        }
        if self.gradient_shards == 0 || self.chunk_rays == 0 {
            return Err(TrainError::Config("gradient shards and chunk size must be positive".into()));
        }
        for (name, v) in [("grid", self.grid_lr), ("mlp", self.mlp_lr), ("interlevel weight", self.interlevel_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} rate {v} must be finite and non-negative")));
            }
        }
        if self.images_per_pool == Some(0) || self.pool_refresh_interval == Some(0) {
            return Err(TrainError::Config("pool size and refresh interval must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { grid_lr: self.grid_lr, mlp_lr: self.mlp_lr, decay_steps: self.max_steps, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub spectral_mse: f64,
    pub interlevel: f64,
    pub total: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: LossBreakdown,
    pub rays_per_sec: f64,
}

impl StepLog {
    /// The loss columns only; stable across runs in deterministic mode.
    pub fn loss_columns(&self) -> String {
        format!(
            "step={} spectral_mse={:.9e} interlevel={:.9e} total={:.9e}",
            self.step, self.loss.spectral_mse, self.loss.interlevel, self.loss.total
        )
    }
}

impl std::fmt::Display for StepLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} rays_per_sec={:.1}", self.loss_columns(), self.rays_per_sec)
    }
}

/// Options for one gradient evaluation.
#[derive(Debug, Clone, Copy)]
pub struct GradientOptions {
    pub seed: u64,
    pub step: u64,
    pub jitter: bool,
    pub interlevel_weight: f64,
    pub chunk_rays: usize,
}

/// Sum of squared residuals and summed interlevel loss over `rays`,
/// accumulating gradients into `grad`. `total_rays` is the size of the full
/// batch that normalizes both losses; `first_index` is the batch position of
/// `rays[0]`.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_gradients<T: Real>(
    model: &Model<T>,
    rays: &[Ray],
    truth: &[T],
    first_index: usize,
    total_rays: usize,
    opts: &GradientOptions,
    grad: &mut Model<T>,
) -> Result<(f64, f64), TrainError> {
    let bands = model.band_count();
    if truth.len() != rays.len() * bands {
        return Err(TrainError::Shape(format!(
            "truth holds {} values for {} rays of {} bands",
            truth.len(),
            rays.len(),
            bands
        )));
    }
    let norm = T::from_usize(total_rays * bands).unwrap();
    let il_scale = T::lit(opts.interlevel_weight / total_rays as f64);
    let mut sse = 0.0;
    let mut interlevel = 0.0;
    for (c, chunk) in rays.chunks(opts.chunk_rays).enumerate() {
        let start = c * opts.chunk_rays;
        let mut rngs: Option<Vec<ChaCha8Rng>> = opts.jitter.then(|| {
            (0..chunk.len()).map(|i| ray_rng(opts.seed, opts.step, (first_index + start + i) as u64)).collect()
        });
        let fwd = model.forward_chunk(chunk, rngs.as_deref_mut())?;
        let mut d_color = Vec::with_capacity(chunk.len() * bands);
        for (i, out) in fwd.outputs.iter().enumerate() {
            let t = &truth[(start + i) * bands..(start + i + 1) * bands];
            for (p, y) in out.color.iter().zip(t) {
                let r = *p - *y;
                sse += (r * r).as_f64();
                d_color.push((r + r) / norm);
            }
        }
        interlevel += model.backward_chunk(&fwd, &d_color, il_scale, grad)?;
    }
    Ok((sse, interlevel))
}

/// Loss and full gradient for a batch, evaluated serially.
pub fn loss_and_gradient<T: Real>(
    model: &Model<T>,
    rays: &[Ray],
    truth: &[T],
    opts: &GradientOptions,
) -> Result<(LossBreakdown, Model<T>), TrainError> {
    let mut grad = model.zeros_like();
    let (sse, il) = accumulate_gradients(model, rays, truth, 0, rays.len(), opts, &mut grad)?;
    Ok((breakdown(sse, il, rays.len(), model.band_count(), opts.interlevel_weight), grad))
}

fn breakdown(sse: f64, interlevel_sum: f64, rays: usize, bands: usize, weight: f64) -> LossBreakdown {
    let spectral_mse = sse / (rays * bands) as f64;
    let interlevel = interlevel_sum / rays as f64;
    LossBreakdown { spectral_mse, interlevel, total: spectral_mse + weight * interlevel }
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub adam: Adam<T>,
    /// Completed optimizer steps.
    pub step: u64,
    kinds: Vec<TensorKind>,
    shard_grads: Vec<Model<T>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig, model: Model<T>) -> Result<Self, TrainError> {
        config.validate()?;
        let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        let adam = Adam::new(config.adam(), &shapes);
        let kinds = model.tensor_kinds();
        Ok(Self { config, model, adam, step: 0, kinds, shard_grads: Vec::new() })
    }

    fn shard_count(&self, rays: usize) -> usize {
        let s = if self.config.deterministic { self.config.gradient_shards } else { rayon::current_num_threads() };
        s.clamp(1, rays.max(1))
    }

    /// One optimizer update. The returned losses are those of the
    /// parameters before the update.
    pub fn train_step(&mut self, batch: &RayBatch) -> Result<StepLog, TrainError> {
        let started = Instant::now();
        let n = batch.rays.len();
        let bands = self.model.band_count();
        if n == 0 || batch.truth.len() != n * bands {
            return Err(TrainError::Shape(format!("batch of {n} rays with {} truth values", batch.truth.len())));
        }
        let truth: Vec<T> = batch.truth.iter().map(|v| T::lit(*v as f64)).collect();
        let shards = self.shard_count(n);
        while self.shard_grads.len() < shards {
            self.shard_grads.push(self.model.zeros_like());
        }
        self.shard_grads.truncate(shards);
        let opts = GradientOptions {
            seed: self.config.seed,
            step: self.step,
            jitter: !self.config.deterministic,
            interlevel_weight: self.config.interlevel_weight,
            chunk_rays: self.config.chunk_rays,
        };
        let model = &self.model;
        let parts: Vec<Result<(f64, f64), TrainError>> = self
            .shard_grads
            .par_iter_mut()
            .enumerate()
            .map(|(s, grad)| {
                grad.fill_zero();
                let (lo, hi) = (s * n / shards, (s + 1) * n / shards);
                accumulate_gradients(model, &batch.rays[lo..hi], &truth[lo * bands..hi * bands], lo, n, &opts, grad)
            })
            .collect();
        let (mut sse, mut il) = (0.0, 0.0);
        for p in parts {
            let (a, b) = p.map_err(|e| self.diverged_or(e))?;
            sse += a;
            il += b;
        }
        let loss = breakdown(sse, il, n, bands, self.config.interlevel_weight);
        if !(loss.total.is_finite() && loss.spectral_mse.is_finite() && loss.interlevel.is_finite()) {
            return Err(TrainError::Divergence { step: self.step, detail: format!("non-finite loss {loss:?}") });
        }
        let (first, rest) = self.shard_grads.split_first_mut().expect("at least one shard");
        if !rest.is_empty() {
            let others: Vec<Vec<&[T]>> = rest.iter().map(|g| g.tensors()).collect();
            for (i, dst) in first.tensors_mut().into_iter().enumerate() {
                dst.par_chunks_mut(4096).enumerate().for_each(|(c, d)| {
                    let (off, len) = (c * 4096, d.len());
                    for o in &others {
                        for (x, y) in d.iter_mut().zip(&o[i][off..off + len]) {
                            *x += *y;
                        }
                    }
                });
            }
        }
        self.adam.update(self.model.tensors_mut(), first.tensors(), &self.kinds);
        self.step += 1;
        let secs = started.elapsed().as_secs_f64();
        Ok(StepLog { step: self.step, loss, rays_per_sec: n as f64 / secs.max(1e-9) })
    }

    /// Overflowing densities or non-finite parameters mean the run diverged.
    fn diverged_or(&self, e: TrainError) -> TrainError {
        let overflow = matches!(e, TrainError::Model(ModelError::Render(RenderError::NonFinite(_))));
        if overflow || self.model.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            TrainError::Divergence { step: self.step, detail: e.to_string() }
        } else {
            e
        }
    }

    /// Deterministic renders in evaluation-sized batches.
    pub fn render_rays(&self, rays: &[Ray]) -> Result<Vec<crate::render::RenderOutput<T>>, TrainError> {
        let mut out = Vec::with_capacity(rays.len());
        for batch in rays.chunks(self.config.rays_per_eval_batch) {
            out.extend(self.model.render_rays(batch, self.config.chunk_rays)?);
        }
        Ok(out)
    }
}
