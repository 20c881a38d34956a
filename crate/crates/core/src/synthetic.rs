//! Analytic multispectral scenes with an exact ray-traced renderer, used to
//! produce datasets whose ground truth is known.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image_io::{
    ms600pro_bands, save_manifest, save_spectral_image, BandSpec, CameraModel, Frame, ImageError, SceneManifest,
    SpectralImage,
};
use crate::rays::{generate_ray, Ray, Vec3};

/// Default gimbal tilt below the horizon, in degrees.
pub const DEFAULT_TILT_DEG: f64 = -60.0;

const THREE_SPHERES: &str = include_str!("../fixtures/three_spheres.json");

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
}

impl Shape {
    /// Entry and exit distances along `ray`, if the line meets the shape.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        match self {
            Shape::Sphere { center, radius } => {
                let oc = origin - Vec3::from(*center);
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some((-b - s, -b + s))
            }
            Shape::Box { min, max } => {
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for a in 0..3 {
                    if dir[a] == 0.0 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let t0 = (min[a] - origin[a]) / dir[a];
                    let t1 = (max[a] - origin[a]) / dir[a];
                    lo = lo.max(t0.min(t1));
                    hi = hi.min(t0.max(t1));
                }
                (lo <= hi).then_some((lo, hi))
            }
        }
    }

    /// Nearest intersection at `t > 0`; an origin inside the shape hits at the exit.
    pub fn first_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let (t0, t1) = self.intersect(origin, dir)?;
        if t0 > 0.0 {
            Some(t0)
        } else if t1 > 0.0 {
            Some(t1)
        } else {
            None
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            Shape::Sphere { center, radius } => center.iter().copied().chain([*radius]).collect(),
            Shape::Box { min, max } => min.iter().chain(max).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(default)]
    pub label: String,
    #[serde(flatten)]
    pub shape: Shape,
    pub spectrum: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub background: Vec<f32>,
}

/// Nearest primitive along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub primitive: usize,
    pub t: f64,
}

impl AnalyticScene {
    /// Empty scene with a zero background.
    pub fn empty(bands: usize) -> Self {
        Self { primitives: Vec::new(), background: vec![0.0; bands] }
    }

    /// Vegetation, soil and water spheres over six bands.
    pub fn three_spheres() -> Self {
        serde_json::from_str(THREE_SPHERES).expect("bundled fixture parses")
    }

    pub fn band_count(&self) -> usize {
        self.background.len()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let b = self.band_count();
        if b == 0 {
            return Err(SceneError::Invalid("background has no bands".into()));
        }
        let in_unit = |s: &[f32]| s.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&self.background) {
            return Err(SceneError::Invalid("background outside [0, 1]".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if p.spectrum.len() != b {
                return Err(SceneError::Invalid(format!(
                    "primitive {i} has {} bands, background has {b}",
                    p.spectrum.len()
                )));
            }
            if !in_unit(&p.spectrum) {
                return Err(SceneError::Invalid(format!("primitive {i} spectrum outside [0, 1]")));
            }
            if p.shape.values().iter().any(|v| !v.is_finite()) {
                return Err(SceneError::Invalid(format!("primitive {i} has non-finite geometry")));
            }
            match &p.shape {
                Shape::Sphere { radius, .. } if *radius <= 0.0 => {
                    return Err(SceneError::Invalid(format!("primitive {i} has radius {radius}")));
                }
                Shape::Box { min, max } if (0..3).any(|a| min[a] > max[a]) => {
                    return Err(SceneError::Invalid(format!("primitive {i} box has min > max")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// First hit along `ray`, ties going to the earlier primitive.
    pub fn trace(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t) = p.shape.first_hit(&ray.origin, &ray.direction) {
                if best.is_none_or(|h| t < h.t) {
                    best = Some(Hit { primitive: i, t });
                }
            }
        }
        best
    }

    /// Spectrum seen along `ray`.
    pub fn radiance(&self, ray: &Ray) -> &[f32] {
        match self.trace(ray) {
            Some(h) => &self.primitives[h.primitive].spectrum,
            None => &self.background,
        }
    }
}

/// Band list matching `count`: the six sensor bands when `count` is 6.
fn scene_bands(count: usize) -> Vec<BandSpec> {
    if count == 6 {
        ms600pro_bands()
    } else {
        crate::image_io::default_bands(count)
    }
}

/// Flat-shaded first-hit rendering of `scene`.
pub fn oracle_render(scene: &AnalyticScene, cam: &CameraModel, pose: &Matrix4<f64>) -> SpectralImage {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let b = scene.band_count();
    let spectra: Vec<&[f32]> = (0..w * h)
        .into_par_iter()
        .map(|i| scene.radiance(&generate_ray(cam, pose, (i % w) as f64, (i / w) as f64)))
        .collect();
    let mut pixels = vec![0.0f32; b * w * h];
    for (i, s) in spectra.iter().enumerate() {
        for (band, v) in s.iter().enumerate() {
            pixels[band * w * h + i] = *v;
        }
    }
    SpectralImage::new(w, h, scene_bands(b), pixels).expect("validated scene spectra")
}

/// Depth of the first hit per pixel, row-major; `None` where the ray escapes.
pub fn oracle_depth(scene: &AnalyticScene, cam: &CameraModel, pose: &Matrix4<f64>) -> Vec<Option<f64>> {
    let w = cam.width as usize;
    (0..w * cam.height as usize)
        .into_par_iter()
        .map(|i| scene.trace(&generate_ray(cam, pose, (i % w) as f64, (i / w) as f64)).map(|h| h.t))
        .collect()
}

/// Camera-to-world transform at `eye` looking at `target`, Z up.
pub fn look_at(eye: Vec3, target: Vec3) -> Matrix4<f64> {
    let forward = (target - eye).normalize();
    let mut right = forward.cross(&Vec3::z());
    if right.norm() < 1e-12 {
        right = Vec3::x();
    }
    let right = right.normalize();
    let up = right.cross(&forward);
    let rot = Matrix3::from_columns(&[right, up, -forward]);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
    m
}

/// Poses on a horizontal circle of `radius` around the origin, tilted by
/// `tilt_deg` (negative looks down) so the optical axis meets the origin.
/// The first view sits at azimuth `phase_deg`.
pub fn orbit_poses(n: usize, radius: f64, tilt_deg: f64, phase_deg: f64) -> Vec<Matrix4<f64>> {
    let height = -radius * tilt_deg.to_radians().tan();
    (0..n)
        .map(|i| {
            let phi = (phase_deg + 360.0 * i as f64 / n as f64).to_radians();
            look_at(Vec3::new(radius * phi.cos(), radius * phi.sin(), height), Vec3::zeros())
        })
        .collect()
}

/// Capture settings for a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitConfig {
    pub n_views: usize,
    /// Horizontal distance from the scene center.
    pub orbit_radius: f64,
    pub tilt_deg: f64,
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
    pub scene_scale: f64,
    /// Views rendered between the training azimuths for evaluation.
    pub holdout_views: usize,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        Self {
            n_views: 20,
            orbit_radius: 2.0,
            tilt_deg: DEFAULT_TILT_DEG,
            width: 64,
            height: 64,
            fov_deg: 36.0,
            scene_scale: 1.5,
            holdout_views: 4,
        }
    }
}

impl OrbitConfig {
    /// Distance from camera to scene center.
    pub fn distance(&self) -> f64 {
        self.orbit_radius / self.tilt_deg.to_radians().cos()
    }

    /// Pinhole model with the ray range bracketing a unit-radius region
    /// around the center by a margin.
    pub fn camera(&self) -> CameraModel {
        let f = 0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan();
        let d = self.distance();
        CameraModel {
            fx: f,
            fy: f,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            width: self.width,
            height: self.height,
            near: (d - 1.5).max(0.05 * d),
            far: d + 2.0,
        }
    }
}

/// Generated dataset paths.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: PathBuf,
    pub holdout: Option<PathBuf>,
}

fn write_views(
    scene: &AnalyticScene,
    cam: &CameraModel,
    poses: &[Matrix4<f64>],
    prefix: &str,
    cfg: &OrbitConfig,
    out_dir: &Path,
) -> Result<PathBuf, SceneError> {
    let mut frames = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let file = out_dir.join(format!("{prefix}_{i:03}.msr"));
        save_spectral_image(&oracle_render(scene, cam, pose), &file)?;
        frames.push(Frame { file, camera: *cam, pose: *pose });
    }
    let manifest = SceneManifest { scene_scale: cfg.scene_scale, frames, bands: scene_bands(scene.band_count()) };
    let path = out_dir.join(format!("{prefix}.json"));
    save_manifest(&manifest, &path)?;
    Ok(path)
}

/// Renders the orbit into `out_dir` as MSR images with a `train.json`
/// manifest, plus `holdout.json` for the in-between azimuths.
pub fn gen_dataset(scene: &AnalyticScene, cfg: &OrbitConfig, out_dir: &Path) -> Result<Dataset, SceneError> {
    scene.validate()?;
    if cfg.n_views < 2 {
        return Err(SceneError::Invalid(format!("need at least 2 views, got {}", cfg.n_views)));
    }
    if !(cfg.orbit_radius > 0.0 && cfg.tilt_deg > -90.0 && cfg.tilt_deg < 90.0) {
        return Err(SceneError::Invalid("orbit radius must be positive and tilt within (-90, 90)".into()));
    }
    fs::create_dir_all(out_dir)?;
    let cam = cfg.camera();
    let train = orbit_poses(cfg.n_views, cfg.orbit_radius, cfg.tilt_deg, 0.0);
    let train = write_views(scene, &cam, &train, "train", cfg, out_dir)?;
    let holdout = if cfg.holdout_views > 0 {
        let step = 360.0 / cfg.n_views as f64;
        let poses: Vec<_> = (0..cfg.holdout_views)
            .map(|k| {
                let slot = k * cfg.n_views / cfg.holdout_views;
                let phi = (slot as f64 + 0.5) * step;
                orbit_poses(1, cfg.orbit_radius, cfg.tilt_deg, phi)[0]
            })
            .collect();
        Some(write_views(scene, &cam, &poses, "holdout", cfg, out_dir)?)
    } else {
        None
    };
    Ok(Dataset { train, holdout })
}
