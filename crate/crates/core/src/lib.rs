//! Multispectral neural radiance fields on the CPU.
//!
//! The crate covers the whole pipeline: band-preserving image I/O, ray
//! generation, multi-resolution hash encoding, the density and spectral
//! heads, proposal sampling, volume rendering, training, evaluation and
//! point-cloud export.

pub mod encoding;
pub mod field;
pub mod image_io;
pub mod metrics;
pub mod mlp;
pub mod rays;
pub mod real;
pub mod render;
pub mod sampling;
pub mod synthetic;
pub mod model;
pub mod pointcloud;
pub mod training;
