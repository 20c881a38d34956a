//! Pinhole ray generation and the unbounded-scene contraction.
//!
//! Cameras look down their local −Z axis with +X right and +Y up. Poses are
//! world-from-camera. Pixel `(px, py)` is sampled at its center, `+0.5`.

use nalgebra::{Matrix4, Vector3};

use crate::image_io::CameraModel;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64) -> Self {
        Self { origin, direction: direction.normalize(), near, far }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Camera-frame direction through the center of pixel `(px, py)`, not normalized.
#[inline]
pub fn camera_direction(cam: &CameraModel, px: f64, py: f64) -> Vec3 {
    Vec3::new((px + 0.5 - cam.cx) / cam.fx, -(py + 0.5 - cam.cy) / cam.fy, -1.0)
}

/// Back-projects pixel `(px, py)` through `cam` posed at `pose`.
pub fn generate_ray(cam: &CameraModel, pose: &Matrix4<f64>, px: f64, py: f64) -> Ray {
    debug_assert!(px >= 0.0 && px < cam.width as f64 && py >= 0.0 && py < cam.height as f64);
    let rot = pose.fixed_view::<3, 3>(0, 0);
    let dir = (rot * camera_direction(cam, px, py)).normalize();
    let origin = Vec3::new(pose[(0, 3)], pose[(1, 3)], pose[(2, 3)]);
    Ray { origin, direction: dir, near: cam.near, far: cam.far }
}

/// Maps all of R³ into the open ball of radius 2: identity on the unit ball,
/// `(2 − 1/|x|)·x/|x|` outside.
#[inline]
pub fn contract_position(x: Vec3) -> Vec3 {
    let n = x.norm();
    if n <= 1.0 {
        x
    } else {
        x * ((2.0 - 1.0 / n) / n)
    }
}

/// Contracted ball rescaled into the unit cube, `(x + 2) / 4`.
#[inline]
pub fn to_unit_cube(contracted: Vec3) -> [f64; 3] {
    let c = contracted.map(|v| ((v + 2.0) * 0.25).clamp(0.0, 1.0));
    [c.x, c.y, c.z]
}

/// World point to hash-grid input: normalize by `scene_scale`, contract,
/// then rescale into `[0, 1]³`.
#[inline]
pub fn world_to_grid(x: Vec3, scene_scale: f64) -> [f64; 3] {
    to_unit_cube(contract_position(x / scene_scale))
}
