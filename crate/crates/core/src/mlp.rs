//! Dense ReLU networks with batched forward and exact backward passes.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::EncodingError;
use crate::real::{gemm, MatRef, Real};

/// Hidden widths the fused-MLP layout supports.
pub const ALLOWED_HIDDEN_DIMS: [usize; 4] = [16, 32, 64, 128];

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("stale cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub output_dim: usize,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(FieldError::Shape("input and output dims must be positive".into()));
        }
        if self.hidden_layers > 0 && !ALLOWED_HIDDEN_DIMS.contains(&self.hidden_dim) {
            return Err(FieldError::Shape(format!(
                "hidden_dim {} is not one of {:?}",
                self.hidden_dim, ALLOWED_HIDDEN_DIMS
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((fan_in, self.hidden_dim));
            fan_in = self.hidden_dim;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Weights are row-major `fan_out x fan_in`.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    config: MlpConfig,
    weights: Vec<Vec<T>>,
    biases: Vec<Vec<T>>,
    generation: u64,
}

impl<T: PartialEq> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.weights == other.weights && self.biases == other.biases
    }
}

/// Activations retained by a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    generation: u64,
    rows: usize,
    /// Input to each affine layer; entries after the first are ReLU outputs.
    layer_inputs: Vec<Vec<T>>,
}

impl<T> MlpCache<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

impl<T: Real> Mlp<T> {
    pub fn zeros(config: MlpConfig) -> Result<Self, FieldError> {
        config.validate()?;
        let dims = config.layer_dims();
        Ok(Self {
            config,
            weights: dims.iter().map(|(i, o)| vec![T::zero(); i * o]).collect(),
            biases: dims.iter().map(|(_, o)| vec![T::zero(); *o]).collect(),
            generation: next_generation(),
        })
    }

    /// He-uniform weights, zero biases.
    pub fn init<R: Rng>(config: MlpConfig, rng: &mut R) -> Result<Self, FieldError> {
        let mut mlp = Self::zeros(config)?;
        for (w, (fan_in, _)) in mlp.weights.iter_mut().zip(config.layer_dims()) {
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in w.iter_mut() {
                *v = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(mlp)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn weight(&self, layer: usize) -> &[T] {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        &self.biases[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [T] {
        self.generation = next_generation();
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [T] {
        self.generation = next_generation();
        &mut self.biases[layer]
    }

    /// Parameter tensors in checkpoint order: weight then bias, per layer.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    /// Mutable tensors; invalidates outstanding caches.
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.generation = next_generation();
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
            .collect()
    }

    /// Pre-activation outputs for `rows` stacked inputs (row-major `rows x input_dim`).
    pub fn forward(&self, input: &[T], rows: usize) -> Result<(Vec<T>, MlpCache<T>), FieldError> {
        if input.len() != rows * self.config.input_dim {
            return Err(FieldError::Shape(format!(
                "input holds {} values, expected {} rows of {}",
                input.len(),
                rows,
                self.config.input_dim
            )));
        }
        let dims = self.config.layer_dims();
        let last = dims.len() - 1;
        let mut layer_inputs = Vec::with_capacity(dims.len());
        let mut current = input.to_vec();
        for (k, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let mut out = Vec::with_capacity(rows * fan_out);
            for _ in 0..rows {
                out.extend_from_slice(&self.biases[k]);
            }
            gemm(
                T::one(),
                MatRef::row_major(&current, rows, fan_in),
                MatRef::transposed(&self.weights[k], fan_out, fan_in),
                T::one(),
                &mut out,
            );
            if k != last {
                for v in &mut out {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
            layer_inputs.push(std::mem::replace(&mut current, out));
        }
        Ok((current, MlpCache { generation: self.generation, rows, layer_inputs }))
    }

    /// Single-vector forward.
    pub fn forward_one(&self, input: &[T]) -> Result<(Vec<T>, MlpCache<T>), FieldError> {
        self.forward(input, 1)
    }

    /// Accumulates parameter gradients into `grad` (same shapes as `self`)
    /// and returns the input gradient.
    pub fn backward_into(
        &self,
        cache: &MlpCache<T>,
        upstream: &[T],
        grad: &mut Mlp<T>,
    ) -> Result<Vec<T>, FieldError> {
        if cache.generation != self.generation {
            return Err(FieldError::Cache("parameters changed since the forward pass".into()));
        }
        if grad.config != self.config {
            return Err(FieldError::Shape("gradient buffer has a different layout".into()));
        }
        let rows = cache.rows;
        if upstream.len() != rows * self.config.output_dim {
            return Err(FieldError::Shape(format!(
                "upstream holds {} values, expected {}",
                upstream.len(),
                rows * self.config.output_dim
            )));
        }
        let dims = self.config.layer_dims();
        let mut d_out = upstream.to_vec();
        for k in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[k];
            let x = &cache.layer_inputs[k];
            let db = &mut grad.biases[k];
            for r in 0..rows {
                for (b, d) in db.iter_mut().zip(&d_out[r * fan_out..(r + 1) * fan_out]) {
                    *b += *d;
                }
            }
            gemm(
                T::one(),
                MatRef::transposed(&d_out, rows, fan_out),
                MatRef::row_major(x, rows, fan_in),
                T::one(),
                &mut grad.weights[k],
            );
            let mut d_in = vec![T::zero(); rows * fan_in];
            gemm(
                T::one(),
                MatRef::row_major(&d_out, rows, fan_out),
                MatRef::row_major(&self.weights[k], fan_out, fan_in),
                T::zero(),
                &mut d_in,
            );
            if k > 0 {
                // x is a ReLU output: zero where the unit was inactive.
                for (d, a) in d_in.iter_mut().zip(x) {
                    if *a <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            d_out = d_in;
        }
        Ok(d_out)
    }

    /// Fresh parameter gradients and the input gradient.
    pub fn backward(&self, cache: &MlpCache<T>, upstream: &[T]) -> Result<(Mlp<T>, Vec<T>), FieldError> {
        let mut grad = Mlp::zeros(self.config)?;
        let d_in = self.backward_into(cache, upstream, &mut grad)?;
        Ok((grad, d_in))
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}
