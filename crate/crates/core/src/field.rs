//! The learnable radiance field.
//!
//! A hash-encoded position goes through the base MLP, which emits one raw
//! density value and a 31-dimensional geometric feature. The color MLP maps
//! the feature plus the spherical-harmonic view direction to `B` bands.
//!
//! Activations: `σ = softplus(raw − 1)` and `c = sigmoid(logit)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{sh_basis, EncodingError, HashGrid, HashGridConfig, SH_COMPONENTS};
use crate::mlp::{FieldError, Mlp, MlpCache, MlpConfig};
use crate::real::Real;

/// Shift applied to the raw density before softplus.
pub const DENSITY_BIAS: f64 = -1.0;

/// Width of the geometric feature passed from the base MLP to the color head.
pub const GEO_FEATURE_DIM: usize = 31;

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn check_positions(xs: &[[f64; 3]]) -> Result<(), EncodingError> {
    match xs.iter().find(|x| !x.iter().all(|v| (0.0..=1.0).contains(v))) {
        Some(x) => Err(EncodingError::Domain(format!("position {x:?} lies outside [0, 1]^3"))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub band_count: usize,
    pub grid: HashGridConfig,
    pub base_hidden_dim: usize,
    pub base_hidden_layers: usize,
    pub geo_feature_dim: usize,
    pub color_hidden_dim: usize,
    pub color_hidden_layers: usize,
}

impl FieldConfig {
    /// Full-size field for `band_count` bands: hidden width 128 in both MLPs,
    /// 31 geometric features, hash max resolution 4096 and 2^21 rows.
    pub fn full_size(band_count: usize) -> Self {
        Self {
            band_count,
            grid: HashGridConfig::base_field(),
            base_hidden_dim: 128,
            base_hidden_layers: 2,
            geo_feature_dim: GEO_FEATURE_DIM,
            color_hidden_dim: 128,
            color_hidden_layers: 3,
        }
    }

    pub fn base_mlp(&self) -> MlpConfig {
        MlpConfig {
            input_dim: self.grid.output_dim(),
            hidden_dim: self.base_hidden_dim,
            hidden_layers: self.base_hidden_layers,
            output_dim: 1 + self.geo_feature_dim,
        }
    }

    pub fn color_mlp(&self) -> MlpConfig {
        MlpConfig {
            input_dim: self.geo_feature_dim + SH_COMPONENTS,
            hidden_dim: self.color_hidden_dim,
            hidden_layers: self.color_hidden_layers,
            output_dim: self.band_count,
        }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.band_count == 0 {
            return Err(FieldError::Shape("band_count must be at least 1".into()));
        }
        if self.geo_feature_dim == 0 {
            return Err(FieldError::Shape("geo_feature_dim must be at least 1".into()));
        }
        self.grid.validate()?;
        self.base_mlp().validate()?;
        self.color_mlp().validate()
    }
}

/// All learnable parameters of the radiance field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams<T> {
    pub config: FieldConfig,
    pub base_grid: HashGrid<T>,
    pub base_mlp: Mlp<T>,
    pub color_mlp: Mlp<T>,
}

/// Per-sample outputs of a batched field evaluation, with everything the
/// backward pass needs.
#[derive(Debug, Clone)]
pub struct FieldBatch<T> {
    pub rows: usize,
    /// Non-negative densities.
    pub sigmas: Vec<T>,
    /// `rows x B` reflectance in (0, 1).
    pub colors: Vec<T>,
    positions: Vec<[f64; 3]>,
    raw_density: Vec<T>,
    base_cache: MlpCache<T>,
    color_cache: MlpCache<T>,
}

impl<T: Real> FieldParams<T> {
    pub fn zeros(config: FieldConfig) -> Result<Self, FieldError> {
        config.validate()?;
        Ok(Self {
            config,
            base_grid: HashGrid::zeros(config.grid)?,
            base_mlp: Mlp::zeros(config.base_mlp())?,
            color_mlp: Mlp::zeros(config.color_mlp())?,
        })
    }

    pub fn init<R: Rng>(config: FieldConfig, rng: &mut R) -> Result<Self, FieldError> {
        config.validate()?;
        Ok(Self {
            config,
            base_grid: HashGrid::init(config.grid, rng)?,
            base_mlp: Mlp::init(config.base_mlp(), rng)?,
            color_mlp: Mlp::init(config.color_mlp(), rng)?,
        })
    }

    pub fn band_count(&self) -> usize {
        self.config.band_count
    }

    /// Tensors in checkpoint order: grid, base MLP, color MLP.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = vec![self.base_grid.params()];
        out.extend(self.base_mlp.tensors());
        out.extend(self.color_mlp.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = vec![self.base_grid.params_mut()];
        out.extend(self.base_mlp.tensors_mut());
        out.extend(self.color_mlp.tensors_mut());
        out
    }

    /// Density and geometric feature at one point of the unit cube.
    pub fn density(&self, x: [f64; 3]) -> Result<(T, Vec<T>), FieldError> {
        let enc = self.base_grid.encode_position(x)?;
        let (raw, _) = self.base_mlp.forward_one(&enc)?;
        let sigma = softplus(raw[0] + T::lit(DENSITY_BIAS));
        Ok((sigma, raw[1..].to_vec()))
    }

    /// `B`-band reflectance for a geometric feature seen from unit direction `d`.
    pub fn color(&self, geo_feature: &[T], d: [f64; 3]) -> Result<Vec<T>, FieldError> {
        if geo_feature.len() != self.config.geo_feature_dim {
            return Err(FieldError::Shape(format!(
                "geometric feature has {} entries, expected {}",
                geo_feature.len(),
                self.config.geo_feature_dim
            )));
        }
        let sh = crate::encoding::encode_direction(d)?;
        let mut input = geo_feature.to_vec();
        input.extend(sh.iter().map(|v| T::lit(*v)));
        let (logits, _) = self.color_mlp.forward_one(&input)?;
        Ok(logits.into_iter().map(sigmoid).collect())
    }

    /// Evaluates `positions.len()` samples; `directions[i]` is the unit view
    /// direction of sample `i`.
    pub fn forward_batch(
        &self,
        positions: &[[f64; 3]],
        directions: &[[f64; 3]],
    ) -> Result<FieldBatch<T>, FieldError> {
        let rows = positions.len();
        if directions.len() != rows {
            return Err(FieldError::Shape(format!(
                "{} positions but {} directions",
                rows,
                directions.len()
            )));
        }
        check_positions(positions)?;
        let enc_dim = self.base_grid.output_dim();
        let mut enc = vec![T::zero(); rows * enc_dim];
        for (x, out) in positions.iter().zip(enc.chunks_exact_mut(enc_dim)) {
            self.base_grid.encode_unchecked(x, out);
        }
        let (raw, base_cache) = self.base_mlp.forward(&enc, rows)?;
        let geo = self.config.geo_feature_dim;
        let raw_w = geo + 1;
        let color_in_dim = geo + SH_COMPONENTS;
        let mut color_in = vec![T::zero(); rows * color_in_dim];
        let mut sigmas = Vec::with_capacity(rows);
        let mut raw_density = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = &raw[i * raw_w..(i + 1) * raw_w];
            let shifted = r[0] + T::lit(DENSITY_BIAS);
            raw_density.push(shifted);
            sigmas.push(softplus(shifted));
            let dst = &mut color_in[i * color_in_dim..(i + 1) * color_in_dim];
            dst[..geo].copy_from_slice(&r[1..]);
            for (d, s) in dst[geo..].iter_mut().zip(sh_basis(directions[i])) {
                *d = T::lit(s);
            }
        }
        let (logits, color_cache) = self.color_mlp.forward(&color_in, rows)?;
        let colors = logits.into_iter().map(sigmoid).collect();
        Ok(FieldBatch {
            rows,
            sigmas,
            colors,
            positions: positions.to_vec(),
            raw_density,
            base_cache,
            color_cache,
        })
    }

    /// Accumulates parameter gradients for upstream `d_sigma` (per sample)
    /// and `d_color` (`rows x B`) into `grad`.
    pub fn backward_batch(
        &self,
        batch: &FieldBatch<T>,
        d_sigma: &[T],
        d_color: &[T],
        grad: &mut FieldParams<T>,
    ) -> Result<(), FieldError> {
        let rows = batch.rows;
        let bands = self.config.band_count;
        if d_sigma.len() != rows || d_color.len() != rows * bands {
            return Err(FieldError::Shape("upstream gradients do not match the batch".into()));
        }
        let d_logits: Vec<T> = d_color
            .iter()
            .zip(&batch.colors)
            .map(|(g, c)| *g * *c * (T::one() - *c))
            .collect();
        let d_color_in = self.color_mlp.backward_into(&batch.color_cache, &d_logits, &mut grad.color_mlp)?;
        let geo = self.config.geo_feature_dim;
        let color_in_dim = geo + SH_COMPONENTS;
        let raw_w = geo + 1;
        let mut d_raw = vec![T::zero(); rows * raw_w];
        for i in 0..rows {
            let dst = &mut d_raw[i * raw_w..(i + 1) * raw_w];
            dst[0] = d_sigma[i] * sigmoid(batch.raw_density[i]);
            dst[1..].copy_from_slice(&d_color_in[i * color_in_dim..i * color_in_dim + geo]);
        }
        let d_enc = self.base_mlp.backward_into(&batch.base_cache, &d_raw, &mut grad.base_mlp)?;
        let enc_dim = self.base_grid.output_dim();
        let grid_grad = grad.base_grid.params_mut();
        for (x, up) in batch.positions.iter().zip(d_enc.chunks_exact(enc_dim)) {
            self.base_grid.accumulate_unchecked(x, up, grid_grad);
        }
        Ok(())
    }
}

/// Hash grid plus a small MLP emitting density only; the proposal fields.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField<T> {
    pub grid: HashGrid<T>,
    pub mlp: Mlp<T>,
}

#[derive(Debug, Clone)]
pub struct DensityBatch<T> {
    pub sigmas: Vec<T>,
    positions: Vec<[f64; 3]>,
    raw_density: Vec<T>,
    cache: MlpCache<T>,
}

impl<T: Real> DensityField<T> {
    pub fn mlp_config(grid: &HashGridConfig, hidden_dim: usize, hidden_layers: usize) -> MlpConfig {
        MlpConfig { input_dim: grid.output_dim(), hidden_dim, hidden_layers, output_dim: 1 }
    }

    pub fn zeros(grid: HashGridConfig, hidden_dim: usize, hidden_layers: usize) -> Result<Self, FieldError> {
        Ok(Self {
            grid: HashGrid::zeros(grid)?,
            mlp: Mlp::zeros(Self::mlp_config(&grid, hidden_dim, hidden_layers))?,
        })
    }

    pub fn init<R: Rng>(
        grid: HashGridConfig,
        hidden_dim: usize,
        hidden_layers: usize,
        rng: &mut R,
    ) -> Result<Self, FieldError> {
        Ok(Self {
            grid: HashGrid::init(grid, rng)?,
            mlp: Mlp::init(Self::mlp_config(&grid, hidden_dim, hidden_layers), rng)?,
        })
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = vec![self.grid.params()];
        out.extend(self.mlp.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = vec![self.grid.params_mut()];
        out.extend(self.mlp.tensors_mut());
        out
    }

    pub fn forward_batch(&self, positions: &[[f64; 3]]) -> Result<DensityBatch<T>, FieldError> {
        check_positions(positions)?;
        let rows = positions.len();
        let enc_dim = self.grid.output_dim();
        let mut enc = vec![T::zero(); rows * enc_dim];
        for (x, out) in positions.iter().zip(enc.chunks_exact_mut(enc_dim)) {
            self.grid.encode_unchecked(x, out);
        }
        let (raw, cache) = self.mlp.forward(&enc, rows)?;
        let raw_density: Vec<T> = raw.iter().map(|r| *r + T::lit(DENSITY_BIAS)).collect();
        let sigmas = raw_density.iter().map(|r| softplus(*r)).collect();
        Ok(DensityBatch { sigmas, positions: positions.to_vec(), raw_density, cache })
    }

    pub fn backward_batch(
        &self,
        batch: &DensityBatch<T>,
        d_sigma: &[T],
        grad: &mut DensityField<T>,
    ) -> Result<(), FieldError> {
        if d_sigma.len() != batch.sigmas.len() {
            return Err(FieldError::Shape("density upstream does not match the batch".into()));
        }
        let d_raw: Vec<T> = d_sigma.iter().zip(&batch.raw_density).map(|(g, r)| *g * sigmoid(*r)).collect();
        let d_enc = self.mlp.backward_into(&batch.cache, &d_raw, &mut grad.mlp)?;
        let enc_dim = self.grid.output_dim();
        let grid_grad = grad.grid.params_mut();
        for (x, up) in batch.positions.iter().zip(d_enc.chunks_exact(enc_dim)) {
            self.grid.accumulate_unchecked(x, up, grid_grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(bands: usize) -> FieldConfig {
        FieldConfig {
            band_count: bands,
            grid: HashGridConfig {
                levels: 4,
                features_per_level: 2,
                log2_table_size: 12,
                base_resolution: 4,
                max_resolution: 32,
            },
            base_hidden_dim: 16,
            base_hidden_layers: 2,
            geo_feature_dim: GEO_FEATURE_DIM,
            color_hidden_dim: 16,
            color_hidden_layers: 3,
        }
    }

    #[test]
    fn zero_field_density_is_softplus_of_minus_one() {
        let f = FieldParams::<f64>::zeros(small(6)).unwrap();
        let (sigma, geo) = f.density([0.2, 0.5, 0.9]).unwrap();
        assert!((sigma - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((sigma - 0.3133).abs() < 1e-4);
        assert_eq!(geo.len(), 31);
    }

    #[test]
    fn zero_color_head_is_half_gray() {
        let f = FieldParams::<f64>::zeros(small(6)).unwrap();
        let c = f.color(&[0.0; 31], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(c, vec![0.5; 6]);
    }

    #[test]
    fn color_head_width_follows_band_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for b in [1usize, 3, 6, 12] {
            let f = FieldParams::<f32>::init(small(b), &mut rng).unwrap();
            let geo = vec![0.1f32; 31];
            assert_eq!(f.color(&geo, [1.0, 0.0, 0.0]).unwrap().len(), b);
            let batch = f.forward_batch(&[[0.5; 3], [0.1; 3]], &[[0.0, 0.0, 1.0]; 2]).unwrap();
            assert_eq!(batch.colors.len(), 2 * b);
        }
    }

    #[test]
    fn full_size_dimensions() {
        let c = FieldConfig::full_size(6);
        assert_eq!(c.base_mlp().output_dim, 32);
        assert_eq!(c.color_mlp().input_dim, 31 + 16);
        assert_eq!(c.color_mlp().output_dim, 6);
        assert_eq!(c.base_hidden_dim, 128);
        assert_eq!(c.color_hidden_dim, 128);
        assert_eq!(c.grid.max_resolution, 4096);
        assert_eq!(c.grid.table_rows(), 1 << 21);
    }

    #[test]
    fn wrong_feature_width_is_shape_error() {
        let f = FieldParams::<f64>::zeros(small(3)).unwrap();
        assert!(matches!(f.color(&[0.0; 30], [0.0, 0.0, 1.0]), Err(FieldError::Shape(_))));
    }

    #[test]
    fn batch_matches_single_point_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut f = FieldParams::<f64>::init(small(6), &mut rng).unwrap();
        for p in f.base_grid.params_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        let x = [0.31, 0.62, 0.47];
        let d = [0.0, 0.6, -0.8];
        let batch = f.forward_batch(&[x], &[d]).unwrap();
        let (sigma, geo) = f.density(x).unwrap();
        assert!((batch.sigmas[0] - sigma).abs() < 1e-12);
        let c = f.color(&geo, d).unwrap();
        for (a, b) in batch.colors.iter().zip(c) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }
}
