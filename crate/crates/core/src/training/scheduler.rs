//! Pooled ray batches: the rays of `N` images are held in memory and
//! replaced by a fresh random subset every `M` batches.

use nalgebra::Matrix4;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image_io::{CameraModel, SpectralImage};
use crate::rays::{generate_ray, Ray, Vec3};

use super::{TrainConfig, TrainError};

/// A posed training view with its calibrated image.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: CameraModel,
    pub pose: Matrix4<f64>,
    pub image: SpectralImage,
}

/// Rays of the current pool, struct-of-arrays: origin and direction as
/// three `f32` each plus `B` truth values.
#[derive(Debug, Clone, Default)]
pub struct RayPool {
    bands: usize,
    origins: Vec<[f32; 3]>,
    directions: Vec<[f32; 3]>,
    truth: Vec<f32>,
    /// `(first ray, view index)` for each image in the pool, ascending.
    segments: Vec<(usize, usize)>,
}

impl RayPool {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Payload bytes per ray: `(3 + 3 + B) · 4`.
    pub fn bytes_per_ray(&self) -> usize {
        (6 + self.bands) * 4
    }

    /// View indices in the pool, in insertion order.
    pub fn views(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.1).collect()
    }

    fn view_of(&self, ray: usize) -> usize {
        let k = self.segments.partition_point(|s| s.0 <= ray) - 1;
        self.segments[k].1
    }

    fn push_view(&mut self, index: usize, view: &TrainView) {
        self.segments.push((self.origins.len(), index));
        let img = &view.image;
        let (w, h) = (img.width() as usize, img.height() as usize);
        for py in 0..h {
            for px in 0..w {
                let r = generate_ray(&view.camera, &view.pose, px as f64, py as f64);
                self.origins.push([r.origin.x as f32, r.origin.y as f32, r.origin.z as f32]);
                self.directions.push([r.direction.x as f32, r.direction.y as f32, r.direction.z as f32]);
                for b in 0..self.bands {
                    self.truth.push(img.get(b, px, py));
                }
            }
        }
    }
}

/// Rays and per-ray truth for one optimizer step.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    /// `rays x B`.
    pub truth: Vec<f32>,
    /// Pool index of every ray.
    pub ids: Vec<u64>,
}

pub struct BatchScheduler {
    views: Vec<TrainView>,
    bands: usize,
    pool_images: usize,
    refresh_interval: Option<usize>,
    batch_rays: usize,
    rng: ChaCha8Rng,
    pool: RayPool,
    batches_since_refresh: usize,
    refreshes: usize,
}

impl BatchScheduler {
    pub fn new(views: Vec<TrainView>, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let Some(first) = views.first() else {
            return Err(TrainError::Config("no training views".into()));
        };
        let bands = first.image.band_count();
        if let Some(v) = views.iter().find(|v| v.image.band_count() != bands) {
            return Err(TrainError::Config(format!(
                "views disagree on band count: {} and {}",
                bands,
                v.image.band_count()
            )));
        }
        let pool_images = cfg.images_per_pool.unwrap_or(views.len());
        if pool_images == 0 || pool_images > views.len() {
            return Err(TrainError::Config(format!(
                "images per pool is {}, but {} images are available",
                pool_images,
                views.len()
            )));
        }
        if cfg.pool_refresh_interval == Some(0) {
            return Err(TrainError::Config("pool refresh interval must be positive".into()));
        }
        let mut s = Self {
            views,
            bands,
            pool_images,
            refresh_interval: cfg.pool_refresh_interval,
            batch_rays: cfg.rays_per_train_batch,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_b47c),
            pool: RayPool::default(),
            batches_since_refresh: 0,
            refreshes: 0,
        };
        s.rebuild_pool();
        Ok(s)
    }

    pub fn band_count(&self) -> usize {
        self.bands
    }

    pub fn views(&self) -> &[TrainView] {
        &self.views
    }

    pub fn pool(&self) -> &RayPool {
        &self.pool
    }

    /// Pool rebuilds so far, including the initial one.
    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    fn rebuild_pool(&mut self) {
        let mut chosen = sample(&mut self.rng, self.views.len(), self.pool_images).into_vec();
        chosen.sort_unstable();
        let mut pool = RayPool { bands: self.bands, ..Default::default() };
        for i in chosen {
            pool.push_view(i, &self.views[i]);
        }
        self.pool = pool;
        self.batches_since_refresh = 0;
        self.refreshes += 1;
    }

    /// Draws the next batch uniformly with replacement from the pool,
    /// refreshing the pool first when `M` batches have been served.
    pub fn next_batch(&mut self) -> RayBatch {
        if let Some(m) = self.refresh_interval {
            if self.batches_since_refresh >= m {
                self.rebuild_pool();
            }
        }
        self.batches_since_refresh += 1;
        let n = self.pool.len();
        let mut rays = Vec::with_capacity(self.batch_rays);
        let mut truth = Vec::with_capacity(self.batch_rays * self.bands);
        let mut ids = Vec::with_capacity(self.batch_rays);
        for _ in 0..self.batch_rays {
            let k = self.rng.random_range(0..n);
            let cam = &self.views[self.pool.view_of(k)].camera;
            let o = self.pool.origins[k];
            let d = self.pool.directions[k];
            rays.push(Ray::new(
                Vec3::new(o[0] as f64, o[1] as f64, o[2] as f64),
                Vec3::new(d[0] as f64, d[1] as f64, d[2] as f64),
                cam.near,
                cam.far,
            ));
            truth.extend_from_slice(&self.pool.truth[k * self.bands..(k + 1) * self.bands]);
            ids.push(k as u64);
        }
        RayBatch { rays, truth, ids }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::default_bands;

    fn views(count: usize) -> Vec<TrainView> {
        (0..count)
            .map(|i| {
                let cam = CameraModel { fx: 4.0, fy: 4.0, cx: 2.0, cy: 1.5, width: 4, height: 3, near: 0.1, far: 5.0 };
                let mut pose = Matrix4::identity();
                pose[(0, 3)] = i as f64;
                TrainView { camera: cam, pose, image: SpectralImage::filled(4, 3, default_bands(6), i as f32 / 100.0).unwrap() }
            })
            .collect()
    }

    fn cfg(n: Option<usize>, m: Option<usize>) -> TrainConfig {
        TrainConfig { images_per_pool: n, pool_refresh_interval: m, rays_per_train_batch: 128, ..Default::default() }
    }

    #[test]
    fn pool_holds_n_images_of_rays() {
        let s = BatchScheduler::new(views(10), &cfg(Some(4), Some(2))).unwrap();
        assert_eq!(s.pool().len(), 4 * 4 * 3);
        assert_eq!(s.pool().bytes_per_ray(), 48);
    }

    #[test]
    fn too_many_pool_images_is_a_config_error() {
        assert!(matches!(BatchScheduler::new(views(3), &cfg(Some(4), None)), Err(TrainError::Config(_))));
    }

    #[test]
    fn full_pool_refresh_keeps_the_ray_universe() {
        let mut s = BatchScheduler::new(views(5), &cfg(None, Some(1))).unwrap();
        let before = s.pool().views();
        s.next_batch();
        s.next_batch();
        assert_eq!(s.refreshes(), 2);
        assert_eq!(s.pool().views(), before);
    }

    #[test]
    fn pool_without_refresh_is_built_once() {
        let mut s = BatchScheduler::new(views(5), &cfg(Some(2), None)).unwrap();
        let pool = s.pool().views();
        for _ in 0..20 {
            let b = s.next_batch();
            assert_eq!(b.rays.len(), 128);
            assert_eq!(b.truth.len(), 128 * 6);
            for (k, t) in b.truth.chunks(6).enumerate() {
                let view = (t[0] * 100.0).round() as usize;
                assert!(pool.contains(&view), "ray {k} came from view {view}");
            }
        }
        assert_eq!(s.refreshes(), 1);
    }
}
