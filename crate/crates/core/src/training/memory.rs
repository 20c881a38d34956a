//! Peak-memory estimators for host RAM and GPU memory.
//!
//! Host memory is the resident image store plus the ray pool. GPU memory is
//! an affine model in the number of in-flight samples, fitted to two
//! reference measurements. Sizes are in decimal bytes (1 GB = 1e9 bytes).

use serde::Serialize;

pub const GB: f64 = 1e9;

/// Samples per ray in the default sampler: 512 + 256 proposal samples and
/// 48 field samples.
pub const DEFAULT_SAMPLES_PER_RAY: u64 = 512 + 256 + 48;

/// `(training rays, evaluation rays, measured bytes)` for the two GPU
/// reference runs.
pub const GPU_ANCHORS: [(u64, u64, f64); 2] = [(16_384, 8_192, 10.0 * GB), (32_768, 16_384, 16.0 * GB)];

/// Reference host-memory observations: images, N, M, and the observed
/// range in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HostReference {
    pub server_gb: u32,
    pub images: u64,
    pub pool_images: u64,
    pub refresh_interval: u64,
    pub low: f64,
    pub high: f64,
}

pub const HOST_REFERENCES: [HostReference; 2] = [
    HostReference { server_gb: 256, images: 4000, pool_images: 1000, refresh_interval: 2000, low: 180.0 * GB, high: 240.0 * GB },
    HostReference { server_gb: 512, images: 4000, pool_images: 2000, refresh_interval: 4000, low: 340.0 * GB, high: 460.0 * GB },
];

/// Relative tolerance of the estimators against observed ranges.
pub const MODEL_TOLERANCE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Device {
    Cpu,
    Gpu,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryComponent {
    pub name: String,
    pub device: Device,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryBudget {
    pub cpu_peak_bytes: u64,
    pub gpu_peak_bytes: u64,
    pub breakdown: Vec<MemoryComponent>,
}

impl MemoryBudget {
    fn from_components(breakdown: Vec<MemoryComponent>) -> Self {
        let sum = |d: Device| breakdown.iter().filter(|c| c.device == d).map(|c| c.bytes).sum();
        Self { cpu_peak_bytes: sum(Device::Cpu), gpu_peak_bytes: sum(Device::Gpu), breakdown }
    }

    pub fn cpu_gb(&self) -> f64 {
        self.cpu_peak_bytes as f64 / GB
    }

    pub fn gpu_gb(&self) -> f64 {
        self.gpu_peak_bytes as f64 / GB
    }
}

/// Ray-pool payload per ray: origin, direction and `B` truth values in f32.
pub fn bytes_per_ray(bands: u64) -> u64 {
    (3 + 3 + bands) * 4
}

/// Resident images plus the pool of `N · H · W` rays.
pub fn estimate_cpu_memory(images: u64, height: u64, width: u64, bands: u64, pool_images: u64, bytes_per_ray: u64) -> MemoryBudget {
    let store = images * height * width * bands * 4;
    let pool = pool_images * height * width * bytes_per_ray;
    MemoryBudget::from_components(vec![
        MemoryComponent { name: "image store".into(), device: Device::Cpu, bytes: store },
        MemoryComponent { name: "ray pool".into(), device: Device::Cpu, bytes: pool },
    ])
}

/// `bytes = model_bytes + per_sample_bytes · (train + eval) · samples`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GpuMemoryModel {
    pub model_bytes: f64,
    pub per_sample_bytes: f64,
}

impl GpuMemoryModel {
    /// Solves the two-point system for the model size and per-sample cost.
    pub fn calibrate(anchors: [(u64, u64, f64); 2], samples_per_ray: u64) -> Self {
        let x0 = ((anchors[0].0 + anchors[0].1) * samples_per_ray) as f64;
        let x1 = ((anchors[1].0 + anchors[1].1) * samples_per_ray) as f64;
        let per_sample_bytes = (anchors[1].2 - anchors[0].2) / (x1 - x0);
        let model_bytes = anchors[0].2 - per_sample_bytes * x0;
        Self { model_bytes, per_sample_bytes }
    }

    pub fn reference() -> Self {
        Self::calibrate(GPU_ANCHORS, DEFAULT_SAMPLES_PER_RAY)
    }

    pub fn predict(&self, train_rays: u64, eval_rays: u64, samples_per_ray: u64) -> MemoryBudget {
        estimate_gpu_memory_with(self, train_rays, eval_rays, samples_per_ray, self.model_bytes.round() as u64)
    }
}

fn estimate_gpu_memory_with(
    m: &GpuMemoryModel,
    train_rays: u64,
    eval_rays: u64,
    samples_per_ray: u64,
    model_bytes: u64,
) -> MemoryBudget {
    let work = (m.per_sample_bytes * ((train_rays + eval_rays) * samples_per_ray) as f64).round() as u64;
    MemoryBudget::from_components(vec![
        MemoryComponent { name: "model and optimizer".into(), device: Device::Gpu, bytes: model_bytes },
        MemoryComponent { name: "ray batch activations".into(), device: Device::Gpu, bytes: work },
    ])
}

/// GPU estimate with the per-sample cost fitted to the reference runs.
pub fn estimate_gpu_memory(train_rays: u64, eval_rays: u64, samples_per_ray: u64, model_bytes: u64) -> MemoryBudget {
    estimate_gpu_memory_with(&GpuMemoryModel::reference(), train_rays, eval_rays, samples_per_ray, model_bytes)
}

/// Position of an estimate relative to an observed `[low, high]` range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RangeCheck {
    pub predicted: f64,
    pub low: f64,
    pub high: f64,
    /// Distance to the nearest end of the range, zero inside it; negative
    /// when the estimate is below the range.
    pub gap: f64,
    /// Inside `[low · (1 − tol), high · (1 + tol)]`.
    pub within_tolerance: bool,
}

pub fn check_range(predicted: f64, low: f64, high: f64, tolerance: f64) -> RangeCheck {
    let gap = if predicted < low {
        predicted - low
    } else if predicted > high {
        predicted - high
    } else {
        0.0
    };
    RangeCheck {
        predicted,
        low,
        high,
        gap,
        within_tolerance: predicted >= low * (1.0 - tolerance) && predicted <= high * (1.0 + tolerance),
    }
}

/// Host estimate for each reference row at the given image size and bands.
pub fn host_reference_report(height: u64, width: u64, bands: u64) -> Vec<(HostReference, MemoryBudget, RangeCheck)> {
    HOST_REFERENCES
        .iter()
        .map(|r| {
            let b = estimate_cpu_memory(r.images, height, width, bands, r.pool_images, bytes_per_ray(bands));
            let c = check_range(b.cpu_peak_bytes as f64, r.low, r.high, MODEL_TOLERANCE);
            (*r, b, c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_images_no_memory() {
        assert_eq!(estimate_cpu_memory(0, 960, 1280, 6, 0, 48).cpu_peak_bytes, 0);
    }

    #[test]
    fn host_breakdown_for_reference_case() {
        let b = estimate_cpu_memory(4000, 960, 1280, 6, 1000, bytes_per_ray(6));
        assert_eq!(b.breakdown[0].bytes, 4000 * 960 * 1280 * 24);
        assert_eq!(b.breakdown[1].bytes, 1000 * 960 * 1280 * 48);
        assert_eq!(b.cpu_peak_bytes, b.breakdown.iter().map(|c| c.bytes).sum::<u64>());
    }

    #[test]
    fn gpu_fit_reproduces_both_anchors() {
        let m = GpuMemoryModel::reference();
        assert_eq!(m.predict(16_384, 8_192, DEFAULT_SAMPLES_PER_RAY).gpu_peak_bytes, 10_000_000_000);
        assert_eq!(m.predict(32_768, 16_384, DEFAULT_SAMPLES_PER_RAY).gpu_peak_bytes, 16_000_000_000);
        assert_eq!(estimate_gpu_memory(0, 0, 816, 123).gpu_peak_bytes, 123);
    }
}
