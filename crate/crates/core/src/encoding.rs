//! Multiresolution hash-grid position encoding and real spherical-harmonic
//! direction encoding.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::Real;

/// Spatial hash multipliers, one per axis.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Table entries are initialized uniformly in `[-INIT_SCALE, INIT_SCALE]`.
pub const INIT_SCALE: f64 = 1e-4;

/// Spherical-harmonic degree of the direction encoding.
pub const SH_DEGREE: usize = 3;
/// `(SH_DEGREE + 1)²` components.
pub const SH_COMPONENTS: usize = (SH_DEGREE + 1) * (SH_DEGREE + 1);

#[derive(Debug, Error, PartialEq)]
pub enum EncodingError {
    #[error("invalid hash grid configuration: {0}")]
    Config(String),
    #[error("input outside encoder domain: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub log2_table_size: u32,
    pub base_resolution: u32,
    pub max_resolution: u32,
}

impl HashGridConfig {
    /// Base density field: 16 levels of 2 features, 2^21 rows, resolutions 16..4096.
    pub fn base_field() -> Self {
        Self { levels: 16, features_per_level: 2, log2_table_size: 21, base_resolution: 16, max_resolution: 4096 }
    }

    pub fn validate(&self) -> Result<(), EncodingError> {
        if self.levels == 0 || self.features_per_level == 0 {
            return Err(EncodingError::Config("levels and features_per_level must be at least 1".into()));
        }
        if self.base_resolution == 0 || self.max_resolution < self.base_resolution {
            return Err(EncodingError::Config(format!(
                "need 1 <= base_resolution <= max_resolution, got {} and {}",
                self.base_resolution, self.max_resolution
            )));
        }
        if self.log2_table_size == 0 || self.log2_table_size > 30 {
            return Err(EncodingError::Config(format!(
                "log2_table_size must lie in 1..=30, got {}",
                self.log2_table_size
            )));
        }
        if self.levels == 1 && self.max_resolution != self.base_resolution {
            return Err(EncodingError::Config(
                "a single level needs max_resolution equal to base_resolution".into(),
            ));
        }
        Ok(())
    }

    pub fn table_rows(&self) -> usize {
        1usize << self.log2_table_size
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn param_count(&self) -> usize {
        self.levels * self.table_rows() * self.features_per_level
    }
}

/// Per-level grid resolutions `floor(N_min · b^l)` with
/// `b = exp((ln N_max − ln N_min) / (L − 1))`.
pub fn level_resolutions(cfg: &HashGridConfig) -> Result<Vec<u32>, EncodingError> {
    cfg.validate()?;
    if cfg.levels == 1 {
        return Ok(vec![cfg.base_resolution]);
    }
    let n_min = cfg.base_resolution as f64;
    let n_max = cfg.max_resolution as f64;
    let growth = ((n_max.ln() - n_min.ln()) / (cfg.levels - 1) as f64).exp();
    Ok((0..cfg.levels)
        .map(|l| {
            // The small offset keeps exact endpoints from flooring one below.
            let r = (n_min * growth.powi(l as i32) + 1e-6).floor() as u32;
            r.clamp(cfg.base_resolution, cfg.max_resolution)
        })
        .collect())
}

/// Row of grid vertex `coord` at `resolution` in a table of `table_size` rows.
///
/// Levels whose `(resolution + 1)³` vertices fit the table use a dense
/// row-major index; finer levels use the XOR-prime spatial hash.
#[inline]
pub fn hash_index(coord: [u32; 3], resolution: u32, table_size: usize) -> usize {
    let side = resolution as u64 + 1;
    if side * side * side <= table_size as u64 {
        (coord[0] as u64 + coord[1] as u64 * side + coord[2] as u64 * side * side) as usize
    } else {
        let h = coord[0].wrapping_mul(HASH_PRIMES[0])
            ^ coord[1].wrapping_mul(HASH_PRIMES[1])
            ^ coord[2].wrapping_mul(HASH_PRIMES[2]);
        h as usize & (table_size - 1)
    }
}

/// The eight interpolation corners of one level: `(param offset, weight)`.
pub(crate) type Corners = [(usize, f64); 8];

/// Sparse gradient of one table row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGradient<T> {
    pub level: usize,
    pub row: usize,
    pub values: Vec<T>,
}

/// Learnable multiresolution feature tables.
#[derive(Debug, Clone, PartialEq)]
pub struct HashGrid<T> {
    config: HashGridConfig,
    resolutions: Vec<u32>,
    /// Level-major, then row, then feature.
    params: Vec<T>,
}

fn check_unit_cube(x: &[f64; 3]) -> Result<(), EncodingError> {
    if x.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(EncodingError::Domain(format!("position {x:?} lies outside [0, 1]^3")))
    }
}

impl<T: Real> HashGrid<T> {
    pub fn zeros(config: HashGridConfig) -> Result<Self, EncodingError> {
        let resolutions = level_resolutions(&config)?;
        Ok(Self { config, resolutions, params: vec![T::zero(); config.param_count()] })
    }

    /// Tables drawn uniformly from `[-1e-4, 1e-4]`.
    pub fn init<R: Rng>(config: HashGridConfig, rng: &mut R) -> Result<Self, EncodingError> {
        let mut grid = Self::zeros(config)?;
        for p in &mut grid.params {
            *p = T::lit(rng.random_range(-INIT_SCALE..=INIT_SCALE));
        }
        Ok(grid)
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Feature row `row` of `level`.
    pub fn row(&self, level: usize, row: usize) -> &[T] {
        let f = self.config.features_per_level;
        let off = (level * self.config.table_rows() + row) * f;
        &self.params[off..off + f]
    }

    pub fn row_mut(&mut self, level: usize, row: usize) -> &mut [T] {
        let f = self.config.features_per_level;
        let off = (level * self.config.table_rows() + row) * f;
        &mut self.params[off..off + f]
    }

    #[inline]
    pub(crate) fn corners(&self, level: usize, x: &[f64; 3]) -> Corners {
        let res = self.resolutions[level];
        let rows = self.config.table_rows();
        let f = self.config.features_per_level;
        let level_off = level * rows * f;
        let mut cell = [0u32; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let p = x[a] * res as f64;
            // x is in [0, 1], so truncation is floor.
            let i = (p as i64).min(res as i64 - 1);
            cell[a] = i as u32;
            frac[a] = p - i as f64;
        }
        let mut out = [(0usize, 0.0f64); 8];
        for (k, slot) in out.iter_mut().enumerate() {
            let mut c = cell;
            let mut w = 1.0;
            for a in 0..3 {
                if k >> a & 1 == 1 {
                    c[a] += 1;
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            *slot = (level_off + hash_index(c, res, rows) * f, w);
        }
        out
    }

    /// Writes the `L·F` features of `x` into `out`, levels coarse to fine.
    #[inline]
    pub(crate) fn encode_unchecked(&self, x: &[f64; 3], out: &mut [T]) {
        let f = self.config.features_per_level;
        for level in 0..self.config.levels {
            let dst = &mut out[level * f..(level + 1) * f];
            dst.iter_mut().for_each(|v| *v = T::zero());
            for (off, w) in self.corners(level, x) {
                let w = T::lit(w);
                for (d, p) in dst.iter_mut().zip(&self.params[off..off + f]) {
                    *d += w * *p;
                }
            }
        }
    }

    /// Adds the table gradient of `upstream · encode(x)` into `grad`, which
    /// has the layout of [`HashGrid::params`].
    #[inline]
    pub(crate) fn accumulate_unchecked(&self, x: &[f64; 3], upstream: &[T], grad: &mut [T]) {
        let f = self.config.features_per_level;
        for level in 0..self.config.levels {
            let up = &upstream[level * f..(level + 1) * f];
            if up.iter().all(|v| *v == T::zero()) {
                continue;
            }
            for (off, w) in self.corners(level, x) {
                let w = T::lit(w);
                for (g, u) in grad[off..off + f].iter_mut().zip(up) {
                    *g += w * *u;
                }
            }
        }
    }

    /// Encodes one point of the unit cube.
    pub fn encode_position(&self, x: [f64; 3]) -> Result<Vec<T>, EncodingError> {
        check_unit_cube(&x)?;
        let mut out = vec![T::zero(); self.output_dim()];
        self.encode_unchecked(&x, &mut out);
        Ok(out)
    }

    /// Sparse gradient of `upstream · encode(x)` with respect to table rows.
    /// Rows hit by several corners of one level are merged.
    pub fn encode_position_backward(
        &self,
        x: [f64; 3],
        upstream: &[T],
    ) -> Result<Vec<RowGradient<T>>, EncodingError> {
        check_unit_cube(&x)?;
        if upstream.len() != self.output_dim() {
            return Err(EncodingError::Domain(format!(
                "upstream has {} entries, encoder emits {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let f = self.config.features_per_level;
        let rows = self.config.table_rows();
        let mut out: Vec<RowGradient<T>> = Vec::with_capacity(8 * self.config.levels);
        for level in 0..self.config.levels {
            let up = &upstream[level * f..(level + 1) * f];
            let start = out.len();
            for (off, w) in self.corners(level, &x) {
                let row = off / f - level * rows;
                let w = T::lit(w);
                let values: Vec<T> = up.iter().map(|u| w * *u).collect();
                match out[start..].iter_mut().find(|g| g.row == row) {
                    Some(g) => g.values.iter_mut().zip(values).for_each(|(a, b)| *a += b),
                    None => out.push(RowGradient { level, row, values }),
                }
            }
        }
        Ok(out)
    }
}

/// Real spherical harmonics of degree ≤ 3 at a unit direction.
pub fn sh_basis(d: [f64; 3]) -> [f64; SH_COMPONENTS] {
    let [x, y, z] = d;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        0.282_094_791_773_878_14,
        0.488_602_511_902_919_9 * y,
        0.488_602_511_902_919_9 * z,
        0.488_602_511_902_919_9 * x,
        1.092_548_430_592_079_2 * x * y,
        1.092_548_430_592_079_2 * y * z,
        0.946_174_695_757_560_1 * zz - 0.315_391_565_252_520_05,
        1.092_548_430_592_079_2 * x * z,
        0.546_274_215_296_039_6 * (xx - yy),
        0.590_043_589_926_643_5 * y * (3.0 * xx - yy),
        2.890_611_442_640_554 * x * y * z,
        0.457_045_799_464_465_8 * y * (5.0 * zz - 1.0),
        0.373_176_332_590_115_4 * z * (5.0 * zz - 3.0),
        0.457_045_799_464_465_8 * x * (5.0 * zz - 1.0),
        1.445_305_721_320_277 * z * (xx - yy),
        0.590_043_589_926_643_5 * x * (xx - 3.0 * yy),
    ]
}

/// Direction encoding; rejects vectors whose norm is off by more than 1e-6.
pub fn encode_direction(d: [f64; 3]) -> Result<[f64; SH_COMPONENTS], EncodingError> {
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if !((norm - 1.0).abs() <= 1e-6) {
        return Err(EncodingError::Domain(format!("direction {d:?} has norm {norm}, expected 1")));
    }
    Ok(sh_basis(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(levels: usize, n_min: u32, n_max: u32, log2: u32) -> HashGridConfig {
        HashGridConfig {
            levels,
            features_per_level: 2,
            log2_table_size: log2,
            base_resolution: n_min,
            max_resolution: n_max,
        }
    }

    #[test]
    fn two_levels_hit_both_endpoints() {
        assert_eq!(level_resolutions(&cfg(2, 16, 4096, 19)).unwrap(), vec![16, 4096]);
    }

    #[test]
    fn sixteen_level_growth_factor() {
        let r = level_resolutions(&cfg(16, 16, 4096, 19)).unwrap();
        assert_eq!(r[0], 16);
        assert_eq!(r[15], 4096);
        let b = (4096.0f64 / 16.0).powf(1.0 / 15.0);
        assert!((b - 1.447).abs() < 1e-3);
        for l in 0..15 {
            assert!(r[l + 1] >= r[l]);
            // floor() moves each level by less than one cell
            let exact = 16.0 * b.powi(l as i32 + 1);
            assert!(exact - r[l + 1] as f64 >= -1e-6 && exact - (r[l + 1] as f64) < 1.0);
        }
    }

    #[test]
    fn constant_progression() {
        assert_eq!(level_resolutions(&cfg(5, 512, 512, 19)).unwrap(), vec![512; 5]);
    }

    #[test]
    fn single_level_must_be_constant() {
        assert!(matches!(level_resolutions(&cfg(1, 16, 32, 19)), Err(EncodingError::Config(_))));
        assert_eq!(level_resolutions(&cfg(1, 16, 16, 19)).unwrap(), vec![16]);
    }

    #[test]
    fn hash_index_examples() {
        assert_eq!(hash_index([0, 0, 0], 4, 1 << 10), 0);
        assert_eq!(hash_index([0, 0, 0], 4096, 1 << 10), 0);
        assert_eq!(hash_index([1, 2, 3], 4, 1 << 10), 86);
        for c in [[7u32, 99, 1000], [4096, 4096, 4096], [123, 0, 77]] {
            assert!(hash_index(c, 4096, 1 << 12) < 1 << 12);
        }
        let h = 1u32.wrapping_mul(HASH_PRIMES[1]) ^ 2u32.wrapping_mul(HASH_PRIMES[2]) ^ 5;
        assert_eq!(hash_index([5, 1, 2], 4096, 1 << 12), h as usize & 0xfff);
    }

    #[test]
    fn dense_levels_are_injective() {
        let res = 15u32;
        let mut seen = std::collections::HashSet::new();
        for z in 0..=res {
            for y in 0..=res {
                for x in 0..=res {
                    assert!(seen.insert(hash_index([x, y, z], res, 1 << 12)));
                }
            }
        }
    }

    #[test]
    fn vertex_aligned_point_returns_stored_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut grid = HashGrid::<f64>::init(cfg(3, 4, 16, 12), &mut rng).unwrap();
        for p in grid.params_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        // 0.5 is a vertex at resolutions 4, 8 and 16.
        let x = [0.5, 0.25, 0.75];
        let enc = grid.encode_position(x).unwrap();
        for (l, &res) in grid.resolutions().iter().enumerate() {
            let c = x.map(|v| (v * res as f64).round() as u32);
            let row = hash_index(c, res, grid.config().table_rows());
            assert_eq!(&enc[l * 2..l * 2 + 2], grid.row(l, row));
        }
    }

    #[test]
    fn zero_grid_encodes_to_zero() {
        let grid = HashGrid::<f32>::zeros(cfg(4, 16, 128, 12)).unwrap();
        assert!(grid.encode_position([0.3, 0.7, 0.1]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_cube_is_domain_error() {
        let grid = HashGrid::<f32>::zeros(cfg(2, 4, 8, 10)).unwrap();
        assert!(matches!(grid.encode_position([1.01, 0.0, 0.0]), Err(EncodingError::Domain(_))));
        assert!(matches!(grid.encode_position([f64::NAN, 0.0, 0.0]), Err(EncodingError::Domain(_))));
    }

    #[test]
    fn backward_on_vertex_lands_on_one_row_per_level() {
        let grid = HashGrid::<f64>::zeros(cfg(3, 4, 16, 12)).unwrap();
        let up = vec![1.0, -2.0, 0.5, 0.25, 3.0, 4.0];
        let g = grid.encode_position_backward([0.5, 0.25, 0.75], &up).unwrap();
        let nonzero: Vec<_> = g.iter().filter(|r| r.values.iter().any(|v| *v != 0.0)).collect();
        assert_eq!(nonzero.len(), 3);
        for r in nonzero {
            assert_eq!(r.values, up[r.level * 2..r.level * 2 + 2].to_vec());
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let grid = HashGrid::<f64>::zeros(cfg(2, 4, 8, 10)).unwrap();
        let g = grid.encode_position_backward([0.1, 0.2, 0.3], &[0.0; 4]).unwrap();
        assert!(g.iter().all(|r| r.values.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn sh_constant_term_and_count() {
        let d = [0.6, 0.0, 0.8];
        let e = encode_direction(d).unwrap();
        assert_eq!(e.len(), 16);
        assert!((e[0] - 0.282095).abs() < 1e-6);
        assert!(encode_direction([1.0, 1.0, 0.0]).is_err());
    }
}
