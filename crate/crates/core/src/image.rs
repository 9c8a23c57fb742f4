//! Cell tiles: compact 8-bit storage plus a float working image.

use std::path::Path;

use crate::error::{Error, Result};
use crate::taxonomy::CellClass;

/// Square RGB image, row-major `H x W x 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    size: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {size}x{size}x3 image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&rgb);
        }
        Self { size, data }
    }

    pub fn from_u8(size: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(size, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.size + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = (y * self.size + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn map_pixels(&mut self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) {
        for c in self.data.chunks_exact_mut(3) {
            let out = f([c[0], c[1], c[2]]);
            c.copy_from_slice(&out);
        }
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Rounds to 8 bits per channel.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.pixels() {
            for c in 0..3 {
                m[c] += px[c];
            }
        }
        let n = (self.size * self.size).max(1) as f64;
        m.map(|v| v / n)
    }
}

/// A cell instance as stored in a corpus: 8-bit pixels plus annotations.
///
/// `latent_*` fields carry synthetic ground truth and are never shown to
/// training code paths that model annotation scarcity.
#[derive(Clone, Debug, PartialEq)]
pub struct CellImage {
    pub size: usize,
    pub pixels: Vec<u8>,
    pub label: Option<CellClass>,
    pub description_labels: Option<Vec<u8>>,
    pub latent_label: Option<CellClass>,
    pub latent_descriptions: Option<Vec<u8>>,
    pub score: Option<f64>,
}

impl CellImage {
    pub fn from_rgb(img: &RgbImage) -> Self {
        Self {
            size: img.size(),
            pixels: img.to_u8(),
            label: None,
            description_labels: None,
            latent_label: None,
            latent_descriptions: None,
            score: None,
        }
    }

    pub fn rgb(&self) -> RgbImage {
        RgbImage::from_u8(self.size, &self.pixels).expect("stored tile has a valid shape")
    }
}

pub fn save_png(path: &Path, size: usize, pixels: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let buf = image::RgbImage::from_raw(size as u32, size as u32, pixels.to_vec())
        .ok_or_else(|| Error::Shape(format!("{} bytes for a {size}px tile", pixels.len())))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Loads a square RGB PNG; returns `(size, pixels)`.
pub fn load_png(path: &Path) -> Result<(usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let rgb = img.to_rgb8();
    if rgb.width() != rgb.height() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("tile is {}x{}, expected square", rgb.width(), rgb.height()),
        });
    }
    Ok((rgb.width() as usize, rgb.into_raw()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.png");
        let pixels: Vec<u8> = (0..4 * 4 * 3).map(|i| (i * 5) as u8).collect();
        save_png(&path, 4, &pixels).unwrap();
        let (size, back) = load_png(&path).unwrap();
        assert_eq!(size, 4);
        assert_eq!(back, pixels);
    }

    #[test]
    fn rejects_bad_shape_and_nan() {
        assert!(RgbImage::new(2, vec![0.0; 11]).is_err());
        let mut d = vec![0.0; 12];
        d[3] = f64::NAN;
        assert!(RgbImage::new(2, d).is_err());
    }
}
