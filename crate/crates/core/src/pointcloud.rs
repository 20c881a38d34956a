//! Spectral point clouds: extraction from a renderer, PLY interchange and
//! geometric accuracy against a reference cloud.
//!
//! PLY files are written as
//!
//! ```text
//! ply
//! format binary_little_endian 1.0
//! element vertex <n>
//! property float x
//! property float y
//! property float z
//! property float band_<wavelength>nm    (one per band, in band order)
//! property float accumulation
//! end_header
//! ```
//!
//! followed by `n` packed little-endian records. The reader also accepts
//! ASCII files and any scalar property types, so reference clouds from other
//! tools load as long as they carry `x`, `y` and `z`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Cursor, Read};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::image_io::Frame;
use crate::model::Model;
use crate::rays::{generate_ray, Ray, Vec3};
use crate::real::Real;
use crate::synthetic::AnalyticScene;

/// Planimetric tolerance in meters; the gate requires a strictly smaller mean.
pub const PLANAR_THRESHOLD_M: f64 = 0.3;
/// Vertical tolerance in meters; the gate requires a strictly smaller mean.
pub const ELEVATION_THRESHOLD_M: f64 = 0.5;
/// Default cutoff for nearest-neighbour matching.
pub const AUTO_MATCH_CUTOFF_M: f64 = 1.0;

#[derive(Debug, Error)]
pub enum PointCloudError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("malformed PLY: {0}")]
    Ply(String),
    #[error("render failed: {0}")]
    Render(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralPoint {
    pub position: [f64; 3],
    pub spectrum: Vec<f32>,
    pub accumulation: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpectralPointCloud {
    /// Center wavelength of each band in nanometers.
    pub wavelengths: Vec<f32>,
    pub points: Vec<SpectralPoint>,
}

impl SpectralPointCloud {
    pub fn new(wavelengths: Vec<f32>) -> Self {
        Self { wavelengths, points: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn validate(&self) -> Result<(), PointCloudError> {
        let b = self.wavelengths.len();
        for (i, p) in self.points.iter().enumerate() {
            if p.position.iter().any(|v| !v.is_finite()) {
                return Err(PointCloudError::Invalid(format!("point {i} has a non-finite coordinate")));
            }
            if p.spectrum.len() != b {
                return Err(PointCloudError::Shape(format!("point {i} has {} bands, expected {b}", p.spectrum.len())));
            }
            if p.spectrum.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(PointCloudError::Invalid(format!("point {i} reflectance outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One rendered ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySample {
    pub color: Vec<f32>,
    pub depth: f64,
    pub accumulation: f64,
}

/// Anything that can render spectra, depth and opacity along rays.
pub trait SpectralRenderer: Sync {
    fn band_count(&self) -> usize;
    fn render(&self, rays: &[Ray]) -> Result<Vec<RaySample>, PointCloudError>;
}

impl<T: Real> SpectralRenderer for Model<T> {
    fn band_count(&self) -> usize {
        Model::band_count(self)
    }

    fn render(&self, rays: &[Ray]) -> Result<Vec<RaySample>, PointCloudError> {
        let out = self.render_rays(rays, 64).map_err(|e| PointCloudError::Render(e.to_string()))?;
        Ok(out
            .into_iter()
            .map(|o| RaySample {
                color: o.color.iter().map(|c| (c.as_f64() as f32).clamp(0.0, 1.0)).collect(),
                depth: o.depth.as_f64(),
                accumulation: o.accumulation.as_f64(),
            })
            .collect())
    }
}

impl SpectralRenderer for AnalyticScene {
    fn band_count(&self) -> usize {
        AnalyticScene::band_count(self)
    }

    fn render(&self, rays: &[Ray]) -> Result<Vec<RaySample>, PointCloudError> {
        Ok(rays
            .par_iter()
            .map(|r| match self.trace(r) {
                Some(h) => RaySample { color: self.primitives[h.primitive].spectrum.clone(), depth: h.t, accumulation: 1.0 },
                None => RaySample { color: self.background.clone(), depth: 0.0, accumulation: 0.0 },
            })
            .collect())
    }
}

/// Back-projects every `stride`-th pixel (in both axes) of every frame
/// whose rendered accumulation reaches `min_accumulation`.
pub fn extract_pointcloud<R: SpectralRenderer + ?Sized>(
    renderer: &R,
    frames: &[Frame],
    wavelengths: Vec<f32>,
    stride: usize,
    min_accumulation: f64,
) -> Result<SpectralPointCloud, PointCloudError> {
    if stride == 0 {
        return Err(PointCloudError::Invalid("stride must be at least 1".into()));
    }
    if !(min_accumulation > 0.0 && min_accumulation <= 1.0) {
        return Err(PointCloudError::Invalid(format!("accumulation threshold {min_accumulation} outside (0, 1]")));
    }
    if wavelengths.len() != renderer.band_count() {
        return Err(PointCloudError::Shape(format!(
            "{} wavelengths for a {}-band renderer",
            wavelengths.len(),
            renderer.band_count()
        )));
    }
    let mut cloud = SpectralPointCloud::new(wavelengths);
    for frame in frames {
        let cam = &frame.camera;
        let rays: Vec<Ray> = (0..cam.height as usize)
            .step_by(stride)
            .flat_map(|py| (0..cam.width as usize).step_by(stride).map(move |px| (px, py)))
            .map(|(px, py)| generate_ray(cam, &frame.pose, px as f64, py as f64))
            .collect();
        let samples = renderer.render(&rays)?;
        for (ray, s) in rays.iter().zip(samples) {
            if s.accumulation >= min_accumulation {
                let p = ray.at(s.depth);
                cloud.points.push(SpectralPoint {
                    position: [p.x, p.y, p.z],
                    spectrum: s.color,
                    accumulation: s.accumulation as f32,
                });
            }
        }
    }
    Ok(cloud)
}

/// Errors of one matched pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointError {
    pub euclidean: f64,
    pub planar: f64,
    pub elevation: f64,
}

impl PointError {
    pub fn between(test: &[f64; 3], reference: &[f64; 3]) -> Self {
        let (dx, dy, dz) = (test[0] - reference[0], test[1] - reference[1], test[2] - reference[2]);
        Self {
            euclidean: (dx * dx + dy * dy + dz * dz).sqrt(),
            planar: dx.hypot(dy),
            elevation: dz.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeoAccuracyReport {
    pub mean_euclidean_m: f64,
    pub mean_planar_m: f64,
    pub mean_elevation_m: f64,
    pub per_point: Vec<PointError>,
}

impl GeoAccuracyReport {
    /// Report holding only summary values, e.g. published figures.
    pub fn from_means(mean_euclidean_m: f64, mean_planar_m: f64, mean_elevation_m: f64) -> Self {
        Self { mean_euclidean_m, mean_planar_m, mean_elevation_m, per_point: Vec::new() }
    }
}

fn check_matched(test: &[[f64; 3]], reference: &[[f64; 3]]) -> Result<(), PointCloudError> {
    if test.len() != reference.len() {
        return Err(PointCloudError::Shape(format!(
            "{} test points against {} reference points",
            test.len(),
            reference.len()
        )));
    }
    if test.is_empty() {
        return Err(PointCloudError::Shape("no matched points".into()));
    }
    Ok(())
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Mean 3-D distance between index-matched points.
pub fn euclidean_error(test: &[[f64; 3]], reference: &[[f64; 3]]) -> Result<f64, PointCloudError> {
    Ok(geo_report(test, reference)?.mean_euclidean_m)
}

/// Mean horizontal distance and mean absolute height difference, Z up.
pub fn planar_elevation_error(test: &[[f64; 3]], reference: &[[f64; 3]]) -> Result<(f64, f64), PointCloudError> {
    let r = geo_report(test, reference)?;
    Ok((r.mean_planar_m, r.mean_elevation_m))
}

pub fn geo_report(test: &[[f64; 3]], reference: &[[f64; 3]]) -> Result<GeoAccuracyReport, PointCloudError> {
    check_matched(test, reference)?;
    let per_point: Vec<PointError> = test.iter().zip(reference).map(|(t, r)| PointError::between(t, r)).collect();
    let n = per_point.len();
    Ok(GeoAccuracyReport {
        mean_euclidean_m: mean(per_point.iter().map(|p| p.euclidean), n),
        mean_planar_m: mean(per_point.iter().map(|p| p.planar), n),
        mean_elevation_m: mean(per_point.iter().map(|p| p.elevation), n),
        per_point,
    })
}

/// Passes when the mean planar error is below 0.3 m and the mean elevation
/// error below 0.5 m.
pub fn accuracy_gate(report: &GeoAccuracyReport) -> bool {
    report.mean_planar_m < PLANAR_THRESHOLD_M && report.mean_elevation_m < ELEVATION_THRESHOLD_M
}

/// Pairs each test point with its nearest reference point within `cutoff`.
/// Test points without a reference inside the cutoff are left out.
/// Returns `(test index, reference index)` pairs.
pub fn auto_match(test: &[[f64; 3]], reference: &[[f64; 3]], cutoff: f64) -> Result<Vec<(usize, usize)>, PointCloudError> {
    if !(cutoff > 0.0 && cutoff.is_finite()) {
        return Err(PointCloudError::Invalid(format!("cutoff must be positive, got {cutoff}")));
    }
    let cell = |p: &[f64; 3]| -> [i64; 3] { [0, 1, 2].map(|a| (p[a] / cutoff).floor() as i64) };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in reference.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let cut2 = cutoff * cutoff;
    Ok(test
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let c = cell(p);
            let mut best: Option<(f64, usize)> = None;
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(list) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else { continue };
                        for &j in list {
                            let r = &reference[j];
                            let d2 = (0..3).map(|a| (p[a] - r[a]).powi(2)).sum::<f64>();
                            if d2 <= cut2 && best.is_none_or(|(bd, bj)| d2 < bd || (d2 == bd && j < bj)) {
                                best = Some((d2, j));
                            }
                        }
                    }
                }
            }
            best.map(|(_, j)| (i, j))
        })
        .collect())
}

/// Report over automatically matched pairs.
pub fn auto_matched_report(
    test: &[[f64; 3]],
    reference: &[[f64; 3]],
    cutoff: f64,
) -> Result<(GeoAccuracyReport, usize), PointCloudError> {
    let pairs = auto_match(test, reference, cutoff)?;
    let t: Vec<[f64; 3]> = pairs.iter().map(|(i, _)| test[*i]).collect();
    let r: Vec<[f64; 3]> = pairs.iter().map(|(_, j)| reference[*j]).collect();
    Ok((geo_report(&t, &r)?, pairs.len()))
}

/// Two plain-text tables: mean Euclidean error, then mean planar and
/// elevation errors, one row per labelled report.
pub fn format_geo_tables(rows: &[(&str, &GeoAccuracyReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Average Euclidean distance error\n");
    let _ = writeln!(s, "Point cloud category\tMean Euclidean distance error (m)");
    for (label, r) in rows {
        let _ = writeln!(s, "{label}\t{:.3}", r.mean_euclidean_m);
    }
    let _ = writeln!(s, "\nPlane and elevation accuracy error\n");
    let _ = writeln!(s, "Point cloud category\tMean plane distance error (m)\tMean elevation distance error (m)");
    for (label, r) in rows {
        let _ = writeln!(s, "{label}\t{:.3}\t{:.3}", r.mean_planar_m, r.mean_elevation_m);
    }
    s
}

/// Property name for a band, e.g. `band_450nm` or `band_717.5nm`.
pub fn band_property(wavelength: f32) -> String {
    format!("band_{wavelength}nm")
}

pub fn encode_ply(cloud: &SpectralPointCloud) -> Result<Vec<u8>, PointCloudError> {
    cloud.validate()?;
    let mut head = String::from("ply\nformat binary_little_endian 1.0\n");
    let _ = writeln!(head, "element vertex {}", cloud.len());
    for axis in ["x", "y", "z"] {
        let _ = writeln!(head, "property float {axis}");
    }
    for wl in &cloud.wavelengths {
        let _ = writeln!(head, "property float {}", band_property(*wl));
    }
    head.push_str("property float accumulation\nend_header\n");
    let mut out = head.into_bytes();
    out.reserve(cloud.len() * (4 + cloud.wavelengths.len()) * 4);
    for p in &cloud.points {
        for v in p.position {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for v in p.spectrum.iter().chain([&p.accumulation]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes a binary little-endian PLY. Coordinates are stored as `f32`.
pub fn export_ply(cloud: &SpectralPointCloud, path: &Path) -> Result<(), PointCloudError> {
    fs::write(path, encode_ply(cloud)?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
}

fn ply_err(msg: impl Into<String>) -> PointCloudError {
    PointCloudError::Ply(msg.into())
}

/// Parses a PLY file with a `vertex` element carrying `x`, `y`, `z`, and
/// optionally `band_<wl>nm` and `accumulation` properties.
pub fn decode_ply(bytes: &[u8]) -> Result<SpectralPointCloud, PointCloudError> {
    let mut cur = Cursor::new(bytes);
    let mut line = String::new();
    let mut next_line = |cur: &mut Cursor<&[u8]>| -> Result<String, PointCloudError> {
        line.clear();
        if cur.read_line(&mut line).map_err(|_| ply_err("header is not text"))? == 0 {
            return Err(ply_err("header ends early"));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };
    if next_line(&mut cur)? != "ply" {
        return Err(ply_err("missing ply magic"));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let l = next_line(&mut cur)?;
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", "ascii", _] => binary = Some(false),
            ["format", other, _] => return Err(ply_err(format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| ply_err(format!("bad element count {count}")))?,
                props: Vec::new(),
            }),
            ["property", "list", ..] => return Err(ply_err("list properties are not supported")),
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| ply_err(format!("unknown property type {ty}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| ply_err("property before any element"))?
                    .props
                    .push((name.to_string(), ty));
            }
            _ => return Err(ply_err(format!("unexpected header line {l:?}"))),
        }
    }
    let binary = binary.ok_or_else(|| ply_err("missing format line"))?;
    let start = cur.position() as usize;
    let body = &bytes[start..];

    let mut offset = 0usize;
    let mut ascii_lines = if binary { None } else { Some(std::str::from_utf8(body).map_err(|_| ply_err("ascii body is not text"))?.lines()) };
    let mut cloud = None;
    for el in &elements {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let keep = el.name == "vertex";
        for _ in 0..el.count {
            let row: Vec<f64> = if binary {
                let width: usize = el.props.iter().map(|p| p.1.size()).sum();
                let rec = body.get(offset..offset + width).ok_or_else(|| ply_err("body is truncated"))?;
                offset += width;
                let mut o = 0;
                el.props
                    .iter()
                    .map(|(_, t)| {
                        let v = t.read_le(&rec[o..]);
                        o += t.size();
                        v
                    })
                    .collect()
            } else {
                let l = ascii_lines.as_mut().unwrap().next().ok_or_else(|| ply_err("body is truncated"))?;
                let vals: Result<Vec<f64>, _> = l.split_whitespace().map(str::parse).collect();
                let vals = vals.map_err(|_| ply_err(format!("bad ascii record {l:?}")))?;
                if vals.len() != el.props.len() {
                    return Err(ply_err(format!("record has {} values, expected {}", vals.len(), el.props.len())));
                }
                vals
            };
            if keep {
                rows.push(row);
            }
        }
        if keep {
            cloud = Some(vertex_cloud(el, rows)?);
        }
    }
    if binary && offset != body.len() {
        return Err(ply_err(format!("{} trailing bytes", body.len() - offset)));
    }
    cloud.ok_or_else(|| ply_err("no vertex element"))
}

fn vertex_cloud(el: &Element, rows: Vec<Vec<f64>>) -> Result<SpectralPointCloud, PointCloudError> {
    let find = |n: &str| el.props.iter().position(|p| p.0 == n);
    let xyz = [find("x"), find("y"), find("z")];
    let [Some(x), Some(y), Some(z)] = xyz else {
        return Err(ply_err("vertex element lacks x, y or z"));
    };
    let mut bands = Vec::new();
    for (i, (name, _)) in el.props.iter().enumerate() {
        if let Some(wl) = name.strip_prefix("band_").and_then(|r| r.strip_suffix("nm")) {
            let wl: f32 = wl.parse().map_err(|_| ply_err(format!("bad band property {name}")))?;
            bands.push((i, wl));
        }
    }
    let acc = find("accumulation");
    let points = rows
        .into_iter()
        .map(|r| SpectralPoint {
            position: [r[x], r[y], r[z]],
            spectrum: bands.iter().map(|(i, _)| r[*i] as f32).collect(),
            accumulation: acc.map_or(1.0, |i| r[i] as f32),
        })
        .collect();
    Ok(SpectralPointCloud { wavelengths: bands.iter().map(|b| b.1).collect(), points })
}

pub fn import_ply(path: &Path) -> Result<SpectralPointCloud, PointCloudError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_ply(&bytes)
}

/// Signed distance from `p` to the nearest surface of a set of spheres.
pub fn sphere_surface_distance(p: &[f64; 3], spheres: &[(Vec3, f64)]) -> f64 {
    let v = Vec3::from(*p);
    spheres.iter().map(|(c, r)| ((v - c).norm() - r).abs()).fold(f64::INFINITY, f64::min)
}
