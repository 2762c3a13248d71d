//! 8-bit grayscale images and the enhancement procedures applied before
//! training: rotation, histogram equalization and the gamma power law,
//! plus the seeded two-view augmentation built from them.
//!
//! Rounding is half-away-from-zero throughout (`f64::round`).

mod augment;
mod enhance;
mod pgm;
mod rotate;

pub use augment::{augment_pair, augment_view, AugmentConfig};
pub use enhance::{equalization_map, equalize, gamma_transform, histogram};
pub use pgm::{load_pgm, load_pgm_file, save_pgm_file, write_pgm};
pub use rotate::{rotate, DEFAULT_FILL};

use crate::error::{Error, Result};

/// Number of intensity levels of every image.
pub const LEVELS: usize = 256;

/// Row-major 8-bit grayscale raster. Glyphs are dark strokes on a light
/// background.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParam(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidParam(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn levels(&self) -> usize {
        LEVELS
    }

    pub fn pixels(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub(crate) fn map_pixels(&self, lut: &[u8; LEVELS]) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| lut[v as usize]).collect(),
        }
    }

    /// Network input encoding: ink density `(255 - v) / 255`, so the
    /// background is 0 and full strokes are 1.
    pub fn ink(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|&v| (255 - v) as f64 / 255.0)
            .collect()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dimensions() {
        assert!(GrayImage::new(0, 3, vec![]).is_err());
        assert!(GrayImage::new(2, 2, vec![0; 3]).is_err());
        assert!(GrayImage::new(2, 2, vec![0; 4]).is_ok());
    }

    #[test]
    fn ink_encoding() {
        let img = GrayImage::new(2, 1, vec![255, 0]).unwrap();
        assert_eq!(img.ink(), vec![0.0, 1.0]);
    }
}
