//! Adam with per-group learning rates and exponential decay.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate of hash-table tensors.
    pub grid_lr: f64,
    /// Learning rate of MLP weights and biases.
    pub mlp_lr: f64,
    /// Fraction of the initial rate reached at `decay_steps`.
    pub final_lr_fraction: f64,
    pub decay_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            grid_lr: 1e-2,
            mlp_lr: 1e-3,
            final_lr_fraction: 0.1,
            decay_steps: 30_000,
        }
    }
}

impl AdamConfig {
    /// `lr · fraction^(step / decay_steps)`, `step` counted from 0.
    pub fn lr_at(&self, base: f64, step: u64) -> f64 {
        if self.decay_steps == 0 {
            return base;
        }
        base * self.final_lr_fraction.powf(step as f64 / self.decay_steps as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Grid,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Completed updates.
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|n| vec![T::zero(); *n]).collect(),
            v: shapes.iter().map(|n| vec![T::zero(); *n]).collect(),
        }
    }

    /// One update of every tensor. `kinds[i]` picks the learning rate.
    pub fn update(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>, kinds: &[TensorKind]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let c = self.config;
        let t = self.step + 1;
        let bc1 = 1.0 - c.beta1.powf(t as f64);
        let bc2 = 1.0 - c.beta2.powf(t as f64);
        let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps));
        let (ib1, ib2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let base = match kinds[i] {
                TensorKind::Grid => c.grid_lr,
                TensorKind::Mlp => c.mlp_lr,
            };
            let lr = c.lr_at(base, self.step);
            if lr == 0.0 {
                continue;
            }
            // Step size and bias corrections folded into two scalars.
            let step_size = T::lit(lr / bc1);
            let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.par_chunks_mut(4096)
                .zip(g.par_chunks(4096))
                .zip(m.par_chunks_mut(4096).zip(v.par_chunks_mut(4096)))
                .for_each(|((p, g), (m, v))| {
                    for k in 0..p.len() {
                        let gk = g[k];
                        m[k] = b1 * m[k] + ib1 * gk;
                        v[k] = b2 * v[k] + ib2 * gk * gk;
                        p[k] -= step_size * m[k] / (v[k].sqrt() * inv_sqrt_bc2 + eps);
                    }
                });
        }
        self.step = t;
    }
}
