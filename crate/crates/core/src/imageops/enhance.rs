//! Histogram equalization and the gamma power law.

use super::{GrayImage, LEVELS};
use crate::error::{Error, Result};

/// Pixel count per intensity level.
pub fn histogram(img: &GrayImage) -> [u64; LEVELS] {
    let mut counts = [0u64; LEVELS];
    for &v in img.pixels() {
        counts[v as usize] += 1;
    }
    counts
}

/// The equalization lookup table: level `k` maps to
/// `round((L-1) * sum_{j<=k} n_j / (M*N))`.
pub fn equalization_map(img: &GrayImage) -> [u8; LEVELS] {
    let counts = histogram(img);
    let total = img.pixels().len() as f64;
    let mut lut = [0u8; LEVELS];
    let mut cumulative = 0u64;
    for (k, &n) in counts.iter().enumerate() {
        cumulative += n;
        let s = ((LEVELS as u64 - 1) * cumulative) as f64 / total;
        lut[k] = s.round() as u8;
    }
    lut
}

pub fn equalize(img: &GrayImage) -> GrayImage {
    img.map_pixels(&equalization_map(img))
}

/// `V_out = A * V_in^gamma` on intensities normalized to `[0, 1]`, clamped
/// back into range before requantizing.
pub fn gamma_transform(img: &GrayImage, gain: f64, gamma: f64) -> Result<GrayImage> {
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "gamma gain must be > 0, got {gain}"
        )));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "gamma must be > 0, got {gamma}"
        )));
    }
    let top = (LEVELS - 1) as f64;
    let mut lut = [0u8; LEVELS];
    for (k, slot) in lut.iter_mut().enumerate() {
        let v = k as f64 / top;
        let out = (gain * v.powf(gamma)).clamp(0.0, 1.0);
        *slot = (out * top).round() as u8;
    }
    Ok(img.map_pixels(&lut))
}
