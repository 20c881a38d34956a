//! Binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "MSNF"  u32 version
//! u32 B, then per band: u16 name length, UTF-8 name, f32 wavelength (nm)
//! u32 x 10  base grid (levels, features, log2 table, base res, max res),
//!           base MLP (hidden, layers), geo feature dim, color MLP (hidden, layers)
//! u32 x 12  proposal samples (2), max res (2), levels (2), log2 table,
//!           features, base res, hidden, layers, final samples
//! f64 scene scale   u64 seed   u64 step
//! f64 x 6   Adam beta1, beta2, eps, grid lr, mlp lr, final lr fraction
//! u64 decay steps   u64 Adam step
//! u32 tensor count, then parameters, first moments, second moments:
//!           each tensor as u64 length + f32 values
//! ```
//!
//! Tensor order: base grid, base MLP (weight, bias per layer), color MLP,
//! then grid and MLP of proposal rounds 1 and 2.

use std::fs;
use std::path::Path;

use crate::image_io::BandSpec;
use crate::model::{Model, ModelConfig};
use crate::sampling::ProposalConfig;

use super::{Adam, AdamConfig, TrainError};
use crate::encoding::HashGridConfig;
use crate::field::FieldConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSNF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub bands: Vec<BandSpec>,
    pub seed: u64,
    pub step: u64,
    pub model: Model<f32>,
    pub adam: Adam<f32>,
}

impl Checkpoint {
    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    /// Fails unless the checkpoint was trained on `expected` bands.
    pub fn check_band_count(&self, expected: usize) -> Result<(), TrainError> {
        if self.band_count() != expected {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint has {} bands, run expects {}",
                self.band_count(),
                expected
            )));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>, TrainError> {
    let cfg = &ck.model.config;
    if cfg.field.band_count != ck.bands.len() {
        return Err(TrainError::Checkpoint("band list does not match the model".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, ck.bands.len());
    for b in &ck.bands {
        let name = b.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&b.center_wavelength.to_le_bytes());
    }
    let f = &cfg.field;
    let g = &f.grid;
    for v in [
        g.levels,
        g.features_per_level,
        g.log2_table_size as usize,
        g.base_resolution as usize,
        g.max_resolution as usize,
        f.base_hidden_dim,
        f.base_hidden_layers,
        f.geo_feature_dim,
        f.color_hidden_dim,
        f.color_hidden_layers,
    ] {
        put_u32(&mut out, v);
    }
    let p = &cfg.proposal;
    for v in [
        p.samples_per_round[0],
        p.samples_per_round[1],
        p.hash_max_resolution[0] as usize,
        p.hash_max_resolution[1] as usize,
        p.hash_levels[0],
        p.hash_levels[1],
        p.log2_table_size as usize,
        p.features_per_level,
        p.base_resolution as usize,
        p.hidden_dim,
        p.hidden_layers,
        p.final_samples,
    ] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&ck.model.scene_scale.to_le_bytes());
    out.extend_from_slice(&ck.seed.to_le_bytes());
    out.extend_from_slice(&ck.step.to_le_bytes());
    let a = &ck.adam.config;
    for v in [a.beta1, a.beta2, a.eps, a.grid_lr, a.mlp_lr, a.final_lr_fraction] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&a.decay_steps.to_le_bytes());
    out.extend_from_slice(&ck.adam.step.to_le_bytes());
    let params = ck.model.tensors();
    if ck.adam.m.len() != params.len() || ck.adam.v.len() != params.len() {
        return Err(TrainError::Checkpoint("optimizer state does not match the model".into()));
    }
    put_u32(&mut out, params.len());
    let moments = ck.adam.m.iter().chain(&ck.adam.v).map(|t| t.as_slice());
    for t in params.into_iter().chain(moments) {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.buf.len() - self.pos < n {
            return Err(TrainError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, TrainError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, TrainError> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, TrainError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor_into(&mut self, dst: &mut [f32]) -> Result<(), TrainError> {
        let len = self.u64()? as usize;
        if len != dst.len() {
            return Err(TrainError::Checkpoint(format!(
                "tensor holds {len} values, layout expects {}",
                dst.len()
            )));
        }
        let raw = self.take(len * 4)?;
        for (d, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint, TrainError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let band_count = r.usize()?;
    let mut bands = Vec::with_capacity(band_count.min(4096));
    for _ in 0..band_count {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| TrainError::Checkpoint("band name is not UTF-8".into()))?
            .to_string();
        bands.push(BandSpec { name, center_wavelength: r.f32()? });
    }
    let grid = HashGridConfig {
        levels: r.usize()?,
        features_per_level: r.usize()?,
        log2_table_size: r.u32()?,
        base_resolution: r.u32()?,
        max_resolution: r.u32()?,
    };
    let field = FieldConfig {
        band_count,
        grid,
        base_hidden_dim: r.usize()?,
        base_hidden_layers: r.usize()?,
        geo_feature_dim: r.usize()?,
        color_hidden_dim: r.usize()?,
        color_hidden_layers: r.usize()?,
    };
    let samples_per_round = [r.usize()?, r.usize()?];
    let hash_max_resolution = [r.u32()?, r.u32()?];
    let hash_levels = [r.usize()?, r.usize()?];
    let proposal = ProposalConfig {
        samples_per_round,
        hash_max_resolution,
        hash_levels,
        log2_table_size: r.u32()?,
        features_per_level: r.usize()?,
        base_resolution: r.u32()?,
        hidden_dim: r.usize()?,
        hidden_layers: r.usize()?,
        final_samples: r.usize()?,
    };
    let config = ModelConfig { field, proposal };
    config.validate().map_err(|e| TrainError::Checkpoint(format!("invalid dimensions: {e}")))?;
    let scene_scale = r.f64()?;
    let seed = r.u64()?;
    let step = r.u64()?;
    let adam_config = AdamConfig {
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
        grid_lr: r.f64()?,
        mlp_lr: r.f64()?,
        final_lr_fraction: r.f64()?,
        decay_steps: r.u64()?,
    };
    let adam_step = r.u64()?;
    let mut model = Model::zeros(config, scene_scale).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let count = r.usize()?;
    if count != model.tensors().len() {
        return Err(TrainError::Checkpoint(format!(
            "{count} tensors stored, layout has {}",
            model.tensors().len()
        )));
    }
    for t in model.tensors_mut() {
        r.tensor_into(t)?;
    }
    let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(adam_config, &shapes);
    adam.step = adam_step;
    for t in adam.m.iter_mut().chain(adam.v.iter_mut()) {
        r.tensor_into(t)?;
    }
    if r.pos != buf.len() {
        return Err(TrainError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint { bands, seed, step, model, adam })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    decode_checkpoint(&fs::read(path)?)
}
