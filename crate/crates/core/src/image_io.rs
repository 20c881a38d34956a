//! Multi-band reflectance rasters, the MSR container, gray-card calibration
//! and the posed-camera scene manifest.
//!
//! Pixels are kept as `f32` reflectance from disk to loss. Nothing in this
//! module rescales or quantizes them.
//!
//! MSR layout (all integers and floats little-endian):
//!
//! ```text
//! "MSR1" | u32 width | u32 height | u32 bands
//! bands x (u16 name_len | name utf-8 | f32 wavelength_nm)
//! bands * height * width x f32, band-major, rows top to bottom
//! ```

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MSR_MAGIC: &[u8; 4] = b"MSR1";

/// Rotation blocks must be orthonormal to this tolerance.
pub const POSE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed MSR data: {0}")]
    Format(String),
    #[error("pixel {index} of band {band} is {value}, outside [0, 1]")]
    Range { band: String, index: usize, value: f32 },
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("frame {frame}: {detail}")]
    Pose { frame: usize, detail: String },
    #[error("frame {frame} has bands {found:?}, expected {expected:?}")]
    BandMismatch { frame: usize, expected: Vec<String>, found: Vec<String> },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("invalid image: {0}")]
    Invalid(String),
}

/// One spectral channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub name: String,
    pub center_wavelength: f32,
}

impl BandSpec {
    pub fn new(name: impl Into<String>, center_wavelength: f32) -> Self {
        Self { name: name.into(), center_wavelength }
    }
}

/// The six bands of the MS600Pro sensor: B, G, R, RE1, RE2 and NIR.
pub fn ms600pro_bands() -> Vec<BandSpec> {
    vec![
        BandSpec::new("B", 450.0),
        BandSpec::new("G", 555.0),
        BandSpec::new("R", 660.0),
        BandSpec::new("RE1", 720.0),
        BandSpec::new("RE2", 750.0),
        BandSpec::new("NIR", 840.0),
    ]
}

/// Placeholder band list for `count` bands: the MS600Pro set when it fits,
/// otherwise evenly spaced wavelengths.
pub fn default_bands(count: usize) -> Vec<BandSpec> {
    let ms = ms600pro_bands();
    match count {
        6 => ms,
        3 => vec![ms[2].clone(), ms[1].clone(), ms[0].clone()],
        _ => (0..count)
            .map(|b| BandSpec::new(format!("b{b}"), 400.0 + 50.0 * b as f32))
            .collect(),
    }
}

fn validate_bands(bands: &[BandSpec]) -> Result<(), ImageError> {
    if bands.is_empty() {
        return Err(ImageError::Invalid("at least one band is required".into()));
    }
    for (i, band) in bands.iter().enumerate() {
        if !(band.center_wavelength > 0.0 && band.center_wavelength.is_finite()) {
            return Err(ImageError::Invalid(format!(
                "band {} has non-positive wavelength {}",
                band.name, band.center_wavelength
            )));
        }
        if bands[..i].iter().any(|b| b.name == band.name) {
            return Err(ImageError::Invalid(format!("duplicate band name {}", band.name)));
        }
    }
    Ok(())
}

/// Planar `B x H x W` reflectance raster.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralImage {
    width: usize,
    height: usize,
    bands: Vec<BandSpec>,
    pixels: Vec<f32>,
}

impl SpectralImage {
    /// Builds an image, checking band metadata, buffer length and the
    /// `[0, 1]` reflectance range.
    pub fn new(
        width: usize,
        height: usize,
        bands: Vec<BandSpec>,
        pixels: Vec<f32>,
    ) -> Result<Self, ImageError> {
        validate_bands(&bands)?;
        let expected = bands.len() * width * height;
        if pixels.len() != expected {
            return Err(ImageError::Invalid(format!(
                "pixel buffer holds {} values, expected {}",
                pixels.len(),
                expected
            )));
        }
        check_range(&bands, width * height, &pixels)?;
        Ok(Self { width, height, bands, pixels })
    }

    /// Constant image, handy for tests and backgrounds.
    pub fn filled(width: usize, height: usize, bands: Vec<BandSpec>, value: f32) -> Result<Self, ImageError> {
        let n = bands.len() * width * height;
        Self::new(width, height, bands, vec![value; n])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn bands(&self) -> &[BandSpec] {
        &self.bands
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Whole planar buffer.
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.pixel_count();
        &self.pixels[b * n..(b + 1) * n]
    }

    #[inline]
    pub fn get(&self, b: usize, x: usize, y: usize) -> f32 {
        self.pixels[b * self.pixel_count() + y * self.width + x]
    }

    /// All bands of one pixel.
    pub fn spectrum(&self, x: usize, y: usize) -> Vec<f32> {
        (0..self.band_count()).map(|b| self.get(b, x, y)).collect()
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    /// Same geometry and bands.
    pub fn same_shape(&self, other: &SpectralImage) -> bool {
        self.width == other.width && self.height == other.height && self.bands.len() == other.bands.len()
    }
}

fn check_range(bands: &[BandSpec], plane: usize, pixels: &[f32]) -> Result<(), ImageError> {
    if let Some(i) = pixels.iter().position(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
        let b = if plane == 0 { 0 } else { i / plane };
        return Err(ImageError::Range {
            band: bands[b].name.clone(),
            index: if plane == 0 { 0 } else { i % plane },
            value: pixels[i],
        });
    }
    Ok(())
}

/// Header fields of an MSR file.
#[derive(Debug, Clone, PartialEq)]
pub struct MsrHeader {
    pub width: usize,
    pub height: usize,
    pub bands: Vec<BandSpec>,
    /// Byte offset of the first pixel.
    pub data_offset: usize,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ImageError> {
        if self.buf.len() - self.pos < n {
            return Err(ImageError::Format(format!("truncated header at byte {}", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, ImageError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ImageError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, ImageError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses the header of an in-memory MSR file.
pub fn parse_msr_header(bytes: &[u8]) -> Result<MsrHeader, ImageError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| ImageError::Format("missing magic".into()))? != MSR_MAGIC {
        return Err(ImageError::Format("bad magic, expected MSR1".into()));
    }
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let band_count = r.u32()? as usize;
    if band_count == 0 {
        return Err(ImageError::Format("band count is zero".into()));
    }
    let mut bands = Vec::with_capacity(band_count.min(1024));
    for _ in 0..band_count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| ImageError::Format(format!("band name is not utf-8: {e}")))?
            .to_string();
        let wavelength = r.f32()?;
        bands.push(BandSpec { name, center_wavelength: wavelength });
    }
    validate_bands(&bands).map_err(|e| ImageError::Format(e.to_string()))?;
    Ok(MsrHeader { width, height, bands, data_offset: r.pos })
}

/// Reads only the header of an MSR file.
pub fn read_msr_header(path: &Path) -> Result<MsrHeader, ImageError> {
    use std::io::Read;
    let mut file = fs::File::open(path)?;
    let mut head = Vec::new();
    // Headers are small; 64 KiB covers hundreds of bands.
    (&mut file).take(1 << 16).read_to_end(&mut head)?;
    parse_msr_header(&head)
}

/// Decodes a complete MSR byte buffer.
pub fn decode_msr(bytes: &[u8]) -> Result<SpectralImage, ImageError> {
    let header = parse_msr_header(bytes)?;
    let count = header
        .bands
        .len()
        .checked_mul(header.width)
        .and_then(|v| v.checked_mul(header.height))
        .ok_or_else(|| ImageError::Format("dimensions overflow".into()))?;
    let payload = &bytes[header.data_offset..];
    if payload.len() != count * 4 {
        return Err(ImageError::Format(format!(
            "pixel payload is {} bytes, header implies {}",
            payload.len(),
            count * 4
        )));
    }
    let pixels: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    check_range(&header.bands, header.width * header.height, &pixels)?;
    Ok(SpectralImage { width: header.width, height: header.height, bands: header.bands, pixels })
}

/// Encodes an image as MSR bytes.
pub fn encode_msr(img: &SpectralImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.bands.len() * 16 + img.pixels.len() * 4);
    out.extend_from_slice(MSR_MAGIC);
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    out.extend_from_slice(&(img.bands.len() as u32).to_le_bytes());
    for band in &img.bands {
        let name = band.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&band.center_wavelength.to_le_bytes());
    }
    for v in &img.pixels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_spectral_image(path: &Path) -> Result<SpectralImage, ImageError> {
    decode_msr(&fs::read(path)?)
}

pub fn save_spectral_image(img: &SpectralImage, path: &Path) -> Result<(), ImageError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_msr(img))?;
    w.flush()?;
    Ok(())
}

/// Result of gray-card calibration.
#[derive(Debug, Clone)]
pub struct Calibrated {
    pub image: SpectralImage,
    /// Pixels clamped to `[0, 1]`, per band.
    pub clamped_per_band: Vec<usize>,
}

impl Calibrated {
    pub fn clamped_total(&self) -> usize {
        self.clamped_per_band.iter().sum()
    }
}

/// Single-point gray-card conversion from rescaled digital numbers to
/// reflectance: `raw * gray_reflectance / gray_dn`, clamped to `[0, 1]`.
pub fn gray_card_calibrate(
    raw: &SpectralImage,
    gray_dn: &[f64],
    gray_reflectance: &[f64],
) -> Result<Calibrated, ImageError> {
    let bands = raw.band_count();
    if gray_dn.len() != bands || gray_reflectance.len() != bands {
        return Err(ImageError::Calibration(format!(
            "expected {bands} gray-card values per list, got {} and {}",
            gray_dn.len(),
            gray_reflectance.len()
        )));
    }
    for b in 0..bands {
        if !(gray_dn[b] > 0.0 && gray_dn[b].is_finite()) {
            return Err(ImageError::Calibration(format!(
                "gray card digital number for band {} must be positive, got {}",
                raw.bands[b].name, gray_dn[b]
            )));
        }
        if !(gray_reflectance[b] > 0.0 && gray_reflectance[b] <= 1.0) {
            return Err(ImageError::Calibration(format!(
                "gray card reflectance for band {} must lie in (0, 1], got {}",
                raw.bands[b].name, gray_reflectance[b]
            )));
        }
    }
    let plane = raw.pixel_count();
    let mut clamped = vec![0usize; bands];
    let mut pixels = Vec::with_capacity(raw.pixels.len());
    for b in 0..bands {
        let gain = gray_reflectance[b] / gray_dn[b];
        for &v in raw.band(b) {
            // Clamp decisions are made on the stored f32 value.
            let r = (v as f64 * gain) as f32;
            if r > 1.0 {
                clamped[b] += 1;
                pixels.push(1.0);
            } else if r < 0.0 {
                clamped[b] += 1;
                pixels.push(0.0);
            } else {
                pixels.push(r);
            }
        }
    }
    debug_assert_eq!(pixels.len(), plane * bands);
    let image = SpectralImage::new(raw.width, raw.height, raw.bands.clone(), pixels)?;
    Ok(Calibrated { image, clamped_per_band: clamped })
}

/// Pinhole intrinsics plus the sampling range along each ray.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(format!("focal lengths must be positive, got {} / {}", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return Err("image size must be non-zero".into());
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(format!("principal point ({}, {}) lies outside the image", self.cx, self.cy));
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(format!("need 0 < near < far, got near {} far {}", self.near, self.far));
        }
        Ok(())
    }
}

/// One posed view.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Image path, resolved against the manifest's directory.
    pub file: PathBuf,
    pub camera: CameraModel,
    /// World-from-camera rigid transform.
    pub pose: Matrix4<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneManifest {
    pub scene_scale: f64,
    pub frames: Vec<Frame>,
    /// Band list shared by every frame.
    pub bands: Vec<BandSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    scene_scale: f64,
    frames: Vec<FrameFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameFile {
    file: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    near: f64,
    far: f64,
    transform: Vec<f64>,
}

/// Checks that the rotation block of `pose` is orthonormal with determinant +1
/// and that the bottom row is `(0, 0, 0, 1)`.
pub fn check_pose(pose: &Matrix4<f64>) -> Result<(), String> {
    if pose.iter().any(|v| !v.is_finite()) {
        return Err("pose has non-finite entries".into());
    }
    let r: Matrix3<f64> = pose.fixed_view::<3, 3>(0, 0).into_owned();
    let gram = r.transpose() * r;
    let err = (gram - Matrix3::identity()).abs().max();
    if err > POSE_TOLERANCE {
        return Err(format!("rotation block is not orthonormal (max deviation {err:.3e})"));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > POSE_TOLERANCE {
        return Err(format!("rotation determinant is {det}, expected +1"));
    }
    let bottom = [pose[(3, 0)], pose[(3, 1)], pose[(3, 2)], pose[(3, 3)]];
    if bottom.iter().zip([0.0, 0.0, 0.0, 1.0]).any(|(a, b)| (a - b).abs() > POSE_TOLERANCE) {
        return Err(format!("bottom row is {bottom:?}, expected [0, 0, 0, 1]"));
    }
    Ok(())
}

/// Parses and validates a manifest. Each frame's image header is read to
/// verify that all frames share one band list and match their camera size.
pub fn load_manifest(path: &Path) -> Result<SceneManifest, ImageError> {
    let text = fs::read_to_string(path)?;
    let parsed: ManifestFile =
        serde_json::from_str(&text).map_err(|e| ImageError::Manifest(e.to_string()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if !(parsed.scene_scale > 0.0 && parsed.scene_scale.is_finite()) {
        return Err(ImageError::Manifest(format!("scene_scale must be positive, got {}", parsed.scene_scale)));
    }
    if parsed.frames.is_empty() {
        return Err(ImageError::Manifest("manifest lists no frames".into()));
    }
    let mut frames = Vec::with_capacity(parsed.frames.len());
    let mut bands: Option<Vec<BandSpec>> = None;
    for (i, f) in parsed.frames.into_iter().enumerate() {
        let camera = CameraModel {
            fx: f.fx,
            fy: f.fy,
            cx: f.cx,
            cy: f.cy,
            width: f.width,
            height: f.height,
            near: f.near,
            far: f.far,
        };
        camera.validate().map_err(|detail| ImageError::Pose { frame: i, detail })?;
        if f.transform.len() != 16 {
            return Err(ImageError::Pose {
                frame: i,
                detail: format!("transform has {} entries, expected 16", f.transform.len()),
            });
        }
        let pose = Matrix4::from_row_slice(&f.transform);
        check_pose(&pose).map_err(|detail| ImageError::Pose { frame: i, detail })?;

        let file = base.join(&f.file);
        let header = read_msr_header(&file)?;
        if header.width != camera.width as usize || header.height != camera.height as usize {
            return Err(ImageError::Manifest(format!(
                "frame {i}: image is {}x{} but camera is {}x{}",
                header.width, header.height, camera.width, camera.height
            )));
        }
        match &bands {
            None => bands = Some(header.bands.clone()),
            Some(expected) if *expected != header.bands => {
                return Err(ImageError::BandMismatch {
                    frame: i,
                    expected: expected.iter().map(|b| b.name.clone()).collect(),
                    found: header.bands.iter().map(|b| b.name.clone()).collect(),
                });
            }
            Some(_) => {}
        }
        frames.push(Frame { file, camera, pose });
    }
    Ok(SceneManifest { scene_scale: parsed.scene_scale, frames, bands: bands.unwrap_or_default() })
}

/// Writes a manifest. Image paths are stored relative to `path`'s directory
/// when possible.
pub fn save_manifest(manifest: &SceneManifest, path: &Path) -> Result<(), ImageError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let frames = manifest
        .frames
        .iter()
        .map(|f| {
            let rel = f.file.strip_prefix(&base).unwrap_or(&f.file);
            let mut transform = Vec::with_capacity(16);
            for r in 0..4 {
                for c in 0..4 {
                    transform.push(f.pose[(r, c)]);
                }
            }
            FrameFile {
                file: rel.to_string_lossy().into_owned(),
                fx: f.camera.fx,
                fy: f.camera.fy,
                cx: f.camera.cx,
                cy: f.camera.cy,
                width: f.camera.width,
                height: f.camera.height,
                near: f.camera.near,
                far: f.camera.far,
                transform,
            }
        })
        .collect();
    let file = ManifestFile { scene_scale: manifest.scene_scale, frames };
    let text = serde_json::to_string_pretty(&file).map_err(|e| ImageError::Manifest(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bands(n: usize) -> Vec<BandSpec> {
        default_bands(n)
    }

    #[test]
    fn constant_image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.msr");
        let img = SpectralImage::filled(2, 2, bands(6), 0.5).unwrap();
        save_spectral_image(&img, &path).unwrap();
        let back = load_spectral_image(&path).unwrap();
        assert_eq!(back.pixels().len(), 24);
        assert!(back.pixels().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn six_band_file_keeps_table_wavelengths() {
        let img = SpectralImage::filled(3, 1, ms600pro_bands(), 0.25).unwrap();
        let back = decode_msr(&encode_msr(&img)).unwrap();
        let wl: Vec<f32> = back.bands().iter().map(|b| b.center_wavelength).collect();
        assert_eq!(wl, vec![450.0, 555.0, 660.0, 720.0, 750.0, 840.0]);
        assert_eq!(back.bands()[5].name, "NIR");
    }

    #[test]
    fn rgb_image_round_trips() {
        let px: Vec<f32> = (0..3 * 4 * 5).map(|i| i as f32 / 60.0).collect();
        let img = SpectralImage::new(4, 5, bands(3), px).unwrap();
        assert_eq!(decode_msr(&encode_msr(&img)).unwrap(), img);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode_msr(&SpectralImage::filled(1, 1, bands(1), 0.1).unwrap());
        bytes[0] = b'X';
        assert!(matches!(decode_msr(&bytes), Err(ImageError::Format(_))));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let mut bytes = encode_msr(&SpectralImage::filled(2, 2, bands(2), 0.1).unwrap());
        bytes.pop();
        assert!(matches!(decode_msr(&bytes), Err(ImageError::Format(_))));
        assert!(matches!(decode_msr(&bytes[..10]), Err(ImageError::Format(_))));
    }

    #[test]
    fn out_of_range_pixel_names_band_and_index() {
        let img = SpectralImage::filled(2, 2, ms600pro_bands(), 0.3).unwrap();
        let mut bytes = encode_msr(&img);
        let header = parse_msr_header(&bytes).unwrap();
        // band 2 (R), pixel 3
        let off = header.data_offset + (2 * 4 + 3) * 4;
        bytes[off..off + 4].copy_from_slice(&1.5f32.to_le_bytes());
        match decode_msr(&bytes) {
            Err(ImageError::Range { band, index, value }) => {
                assert_eq!(band, "R");
                assert_eq!(index, 3);
                assert_eq!(value, 1.5);
            }
            other => panic!("expected range error, got {other:?}"),
        }
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_msr(&bytes), Err(ImageError::Range { .. })));
    }

    #[test]
    fn constructor_rejects_duplicate_band_names() {
        let b = vec![BandSpec::new("G", 555.0), BandSpec::new("G", 560.0)];
        assert!(SpectralImage::filled(1, 1, b, 0.0).is_err());
        assert!(SpectralImage::filled(1, 1, vec![BandSpec::new("X", 0.0)], 0.0).is_err());
    }

    #[test]
    fn calibration_reference_point_maps_to_card_reflectance() {
        let img = SpectralImage::filled(2, 2, bands(2), 0.4).unwrap();
        let out = gray_card_calibrate(&img, &[0.4, 0.4], &[0.18, 0.5]).unwrap();
        assert!(out.image.band(0).iter().all(|&v| (v - 0.18).abs() < 1e-7));
        assert!(out.image.band(1).iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert_eq!(out.clamped_total(), 0);
    }

    #[test]
    fn calibration_identity_when_dn_equals_reflectance() {
        let px: Vec<f32> = (0..8).map(|i| i as f32 / 8.0).collect();
        let img = SpectralImage::new(2, 2, bands(2), px).unwrap();
        let out = gray_card_calibrate(&img, &[0.3, 0.7], &[0.3, 0.7]).unwrap();
        for (a, b) in out.image.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn calibration_clamps_and_counts() {
        let img = SpectralImage::new(2, 1, bands(1), vec![0.8, 0.1]).unwrap();
        let out = gray_card_calibrate(&img, &[0.4], &[0.5]).unwrap();
        // 0.8 * 0.5 / 0.4 = 1.0 exactly: at the bound, not clamped.
        assert_eq!(out.image.pixels()[0], 1.0);
        assert_eq!(out.clamped_total(), 0);
        let img = SpectralImage::new(2, 1, bands(1), vec![0.9, 0.1]).unwrap();
        let out = gray_card_calibrate(&img, &[0.4], &[0.5]).unwrap();
        assert_eq!(out.image.pixels()[0], 1.0);
        assert_eq!(out.clamped_per_band, vec![1]);
    }

    #[test]
    fn calibration_rejects_bad_card() {
        let img = SpectralImage::filled(1, 1, bands(1), 0.2).unwrap();
        assert!(matches!(gray_card_calibrate(&img, &[0.0], &[0.5]), Err(ImageError::Calibration(_))));
        assert!(matches!(gray_card_calibrate(&img, &[-1.0], &[0.5]), Err(ImageError::Calibration(_))));
        assert!(matches!(gray_card_calibrate(&img, &[0.2], &[1.5]), Err(ImageError::Calibration(_))));
    }

    fn write_frame(dir: &Path, name: &str, b: usize) {
        let img = SpectralImage::filled(64, 64, bands(b), 0.1).unwrap();
        save_spectral_image(&img, &dir.join(name)).unwrap();
    }

    fn manifest_json(frames: &[(&str, [f64; 16])]) -> String {
        let frames: Vec<_> = frames
            .iter()
            .map(|(f, t)| {
                serde_json::json!({
                    "file": f, "fx": 100.0, "fy": 100.0, "cx": 32.0, "cy": 32.0,
                    "width": 64, "height": 64, "near": 0.1, "far": 10.0, "transform": t.to_vec()
                })
            })
            .collect();
        serde_json::json!({ "scene_scale": 1.0, "frames": frames }).to_string()
    }

    const IDENTITY: [f64; 16] = [1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.];

    #[test]
    fn identity_pose_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        write_frame(dir.path(), "f0.msr", 6);
        let path = dir.path().join("m.json");
        fs::write(&path, manifest_json(&[("f0.msr", IDENTITY)])).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.frames.len(), 1);
        assert_eq!(m.frames[0].camera.fx, 100.0);
        assert_eq!(m.bands.len(), 6);
        assert_eq!(m.frames[0].pose, Matrix4::identity());
    }

    #[test]
    fn scaled_rotation_is_pose_error() {
        let dir = tempfile::tempdir().unwrap();
        write_frame(dir.path(), "f0.msr", 6);
        let mut t = IDENTITY;
        t[0] = 2.0;
        t[5] = 2.0;
        t[10] = 2.0;
        let path = dir.path().join("m.json");
        fs::write(&path, manifest_json(&[("f0.msr", IDENTITY), ("f0.msr", t)])).unwrap();
        match load_manifest(&path) {
            Err(ImageError::Pose { frame, .. }) => assert_eq!(frame, 1),
            other => panic!("expected pose error, got {other:?}"),
        }
    }

    #[test]
    fn reflection_is_pose_error() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = -1.0;
        assert!(check_pose(&m).unwrap_err().contains("determinant"));
    }

    #[test]
    fn mixed_band_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_frame(dir.path(), "f0.msr", 6);
        write_frame(dir.path(), "f1.msr", 3);
        let path = dir.path().join("m.json");
        fs::write(&path, manifest_json(&[("f0.msr", IDENTITY), ("f1.msr", IDENTITY)])).unwrap();
        assert!(matches!(load_manifest(&path), Err(ImageError::BandMismatch { frame: 1, .. })));
    }

    #[test]
    fn manifest_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_frame(dir.path(), "f0.msr", 6);
        let path = dir.path().join("m.json");
        fs::write(&path, manifest_json(&[("f0.msr", IDENTITY)])).unwrap();
        let m = load_manifest(&path).unwrap();
        let path2 = dir.path().join("m2.json");
        save_manifest(&m, &path2).unwrap();
        assert_eq!(load_manifest(&path2).unwrap(), m);
    }
}
