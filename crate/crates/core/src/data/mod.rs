//! Dataset ingestion, the synthetic glyph generator, and retrieval metrics.

pub mod eval;
pub mod manifest;
pub mod synth;

pub use eval::{eval_retrieval, RetrievalMetrics};
pub use manifest::{load_manifest, Manifest, ManifestRecord, Split};
pub use synth::{gen_synthetic, render_dataset, SynthSpec};

use crate::error::{Error, Result};
use crate::imageops::GrayImage;
use crate::tensor::Tensor;

/// Stacks images into a `[N, 1, H, W]` ink-density batch.
pub fn image_batch(images: &[&GrayImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidParam("empty image batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::shape(
                "image_size",
                format!("batch mixes {w}x{h} with {}x{}", img.width(), img.height()),
            ));
        }
        data.extend(img.ink());
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}

/// Seeded epoch shuffle split into batches. A trailing batch of one sample
/// is dropped, since train-mode batch norm needs at least two.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64, stream: &str) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::rng::stream(seed, stream));
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() > 1 || n == 1)
        .map(<[usize]>::to_vec)
        .collect()
}
