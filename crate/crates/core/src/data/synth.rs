//! Deterministic synthetic glyphs for desk-scale experiments.
//!
//! Each class gets a prototype made of a few random polyline strokes; each
//! sample jitters the stroke vertices and is rasterized dark-on-light with a
//! one-pixel anti-aliased edge.

use std::path::{Path, PathBuf};

use rand::Rng as _;

use super::manifest::{Manifest, ManifestRecord};
use crate::error::{Error, Result};
use crate::imageops::{save_pgm_file, GrayImage};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub width: usize,
    pub height: usize,
    /// Inclusive range of strokes per prototype.
    pub strokes: (usize, usize),
    /// Maximum vertex displacement per sample, in pixels.
    pub jitter: f64,
    /// Stroke half-thickness in pixels.
    pub half_width: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            samples_per_class: 40,
            width: 32,
            height: 32,
            strokes: (2, 4),
            jitter: 1.5,
            half_width: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidParam(
                "synthetic set needs at least 2 classes".into(),
            ));
        }
        if self.samples_per_class < 1 {
            return Err(Error::InvalidParam("samples per class must be >= 1".into()));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidParam(
                "synthetic images must be at least 8x8".into(),
            ));
        }
        if self.strokes.0 < 1 || self.strokes.0 > self.strokes.1 {
            return Err(Error::InvalidParam(format!(
                "bad stroke range {:?}",
                self.strokes
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite())
            || !(self.half_width > 0.0 && self.half_width.is_finite())
        {
            return Err(Error::InvalidParam(
                "jitter must be >= 0 and half width > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn id(class: usize, sample: usize) -> String {
        format!("c{class:02}_s{sample:03}")
    }

    pub fn label(class: usize) -> String {
        format!("class{class:02}")
    }
}

/// One synthetic sample.
#[derive(Debug, Clone)]
pub struct SynthGlyph {
    pub id: String,
    pub label: String,
    pub class: usize,
    pub image: GrayImage,
}

type Stroke = Vec<(f64, f64)>;

fn prototype(spec: &SynthSpec, class: usize) -> Vec<Stroke> {
    let mut r = rng::stream(spec.seed, &format!("synth/class{class}"));
    let margin = 3.0 + spec.half_width;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let n = r.random_range(spec.strokes.0..=spec.strokes.1);
    (0..n)
        .map(|_| {
            let vertices = r.random_range(2..=3);
            (0..vertices)
                .map(|_| {
                    (
                        r.random_range(margin..w - margin),
                        r.random_range(margin..h - margin),
                    )
                })
                .collect()
        })
        .collect()
}

fn dist_to_segment(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt()
}

fn rasterize(strokes: &[Stroke], spec: &SynthSpec) -> GrayImage {
    let mut data = Vec::with_capacity(spec.width * spec.height);
    for row in 0..spec.height {
        for col in 0..spec.width {
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            let d = strokes
                .iter()
                .flat_map(|s| {
                    s.windows(2)
                        .map(|seg| dist_to_segment(px, py, seg[0], seg[1]))
                })
                .fold(f64::INFINITY, f64::min);
            let ink = (spec.half_width + 0.5 - d).clamp(0.0, 1.0);
            data.push((255.0 * (1.0 - ink)).round() as u8);
        }
    }
    GrayImage::new(spec.width, spec.height, data).expect("dimensions match buffer")
}

/// Renders the whole set in memory, class-major.
pub fn render_dataset(spec: &SynthSpec) -> Result<Vec<SynthGlyph>> {
    spec.validate()?;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut out = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for class in 0..spec.classes {
        let proto = prototype(spec, class);
        for sample in 0..spec.samples_per_class {
            let mut r = rng::stream(spec.seed, &format!("synth/class{class}/sample{sample}"));
            let strokes: Vec<Stroke> = proto
                .iter()
                .map(|s| {
                    s.iter()
                        .map(|&(x, y)| {
                            let jx = if spec.jitter > 0.0 {
                                r.random_range(-spec.jitter..=spec.jitter)
                            } else {
                                0.0
                            };
                            let jy = if spec.jitter > 0.0 {
                                r.random_range(-spec.jitter..=spec.jitter)
                            } else {
                                0.0
                            };
                            ((x + jx).clamp(1.0, w - 1.0), (y + jy).clamp(1.0, h - 1.0))
                        })
                        .collect()
                })
                .collect();
            out.push(SynthGlyph {
                id: SynthSpec::id(class, sample),
                label: SynthSpec::label(class),
                class,
                image: rasterize(&strokes, spec),
            });
        }
    }
    Ok(out)
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Writes `<id>.pgm` files and `manifest.tsv` into `dir`.
pub fn gen_synthetic(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let glyphs = render_dataset(spec)?;
    let mut records = Vec::with_capacity(glyphs.len());
    for g in glyphs {
        let file = PathBuf::from(format!("{}.pgm", g.id));
        save_pgm_file(dir.join(&file), &g.image)?;
        records.push(ManifestRecord {
            path: file,
            id: g.id,
            label: g.label,
        });
    }
    let manifest = Manifest::new(dir, records)?;
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, manifest.to_tsv()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
