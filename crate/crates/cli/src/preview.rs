//! Lossy 8-bit PNG previews of single bands, for viewing only. Nothing in
//! the pipeline reads these files back.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use msnerf::image_io::SpectralImage;

/// Writes one grayscale PNG per band as `<stem>_<band>.png` and returns the paths.
pub fn write_band_previews(img: &SpectralImage, dir: &Path, stem: &str) -> std::io::Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(img.band_count());
    for (b, spec) in img.bands().iter().enumerate() {
        let path = dir.join(format!("{stem}_{}.png", spec.name));
        let mut enc = png::Encoder::new(BufWriter::new(File::create(&path)?), img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_text_chunk("Comment".into(), "lossy 8-bit preview, not for measurement".into())
            .map_err(std::io::Error::other)?;
        let data: Vec<u8> = img.band(b).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let mut w = enc.write_header().map_err(std::io::Error::other)?;
        w.write_image_data(&data).map_err(std::io::Error::other)?;
        paths.push(path);
    }
    Ok(paths)
}
