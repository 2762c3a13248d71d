//! Supervised RepVGG classification: softmax cross-entropy training, the
//! penultimate-feature embedding, and export of the fused inference form.

use std::path::Path;

use serde::Serialize;

use crate::data::{image_batch, shuffled_batches, Manifest, Split};
use crate::error::{Error, Result};
use crate::imageops::{augment_view, AugmentConfig, GrayImage};
use crate::repvgg::{build_net, RepVggNet, StagePlan};
use crate::rng;
use crate::tensor::{cosine_lr, sgd_step, Checkpoint, Mode, Module, SgdState, Tape};

/// Images with class indices in `[0, classes)`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub ids: Vec<String>,
    pub images: Vec<GrayImage>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(
        ids: Vec<String>,
        images: Vec<GrayImage>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        if ids.len() != images.len() || ids.len() != labels.len() {
            return Err(Error::Data(
                "ids, images and labels differ in length".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Data(format!("duplicate id `{dup}`")));
        }
        Ok(Self {
            ids,
            images,
            labels,
            classes,
        })
    }

    /// Records of `manifest` whose split tag equals `keep` (all when `None`).
    /// Class indices always come from the full manifest.
    pub fn from_manifest(
        manifest: &Manifest,
        images: &[GrayImage],
        splits: Option<(&[Split], Split)>,
    ) -> Result<Self> {
        let classes = manifest.class_indices();
        let mut ids = Vec::new();
        let mut imgs = Vec::new();
        let mut labels = Vec::new();
        for (i, r) in manifest.records.iter().enumerate() {
            if let Some((tags, keep)) = splits {
                if tags[i] != keep {
                    continue;
                }
            }
            ids.push(r.id.clone());
            imgs.push(images[i].clone());
            labels.push(classes[i]);
        }
        Self::new(ids, imgs, labels, manifest.num_classes())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SupervisedConfig {
    pub plan: StagePlan,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Single-view augmentation applied to each training image; `None`
    /// trains on the raw images.
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            plan: StagePlan::default(),
            epochs: 20,
            batch_size: 32,
            base_lr: 0.4,
            momentum: 0.9,
            weight_decay: 1e-4,
            augment: Some(AugmentConfig::default()),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupervisedEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub lr: f64,
}

/// Trains a fresh training-form network. The returned model is in eval mode.
pub fn train_supervised(
    data: &LabeledDataset,
    cfg: &SupervisedConfig,
) -> Result<(RepVggNet, Vec<SupervisedEpoch>)> {
    if data.classes < 2 {
        return Err(Error::InvalidParam(
            "supervised training needs at least 2 classes".into(),
        ));
    }
    let mut model = build_net(
        &cfg.plan,
        data.classes,
        &mut rng::stream(cfg.seed, "supervised/init"),
    )?;
    let metrics = train_supervised_model(&mut model, data, cfg, |_| {})?;
    Ok((model, metrics))
}

/// Continues training `model` in place, calling `on_epoch` after each epoch.
pub fn train_supervised_model(
    model: &mut RepVggNet,
    data: &LabeledDataset,
    cfg: &SupervisedConfig,
    mut on_epoch: impl FnMut(&SupervisedEpoch),
) -> Result<Vec<SupervisedEpoch>> {
    if data.is_empty() {
        return Err(Error::Data(
            "supervised training needs at least one image".into(),
        ));
    }
    if model.is_fused() {
        return Err(Error::InvalidParam("cannot train a fused network".into()));
    }
    if model.num_classes() != data.classes {
        return Err(Error::shape(
            "classes",
            format!(
                "head has {} outputs, dataset has {} classes",
                model.num_classes(),
                data.classes
            ),
        ));
    }
    if cfg.batch_size < 2 {
        return Err(Error::InvalidParam("batch size must be >= 2".into()));
    }
    if let Some(a) = &cfg.augment {
        a.validate()?;
    }
    let mut sgd = SgdState::new(cfg.base_lr, cfg.batch_size);
    sgd.momentum = cfg.momentum;
    sgd.weight_decay = cfg.weight_decay;
    let plan: Vec<Vec<Vec<usize>>> = (0..cfg.epochs)
        .map(|e| {
            shuffled_batches(
                data.len(),
                cfg.batch_size,
                cfg.seed,
                &format!("supervised/shuffle/epoch{e}"),
            )
        })
        .collect();
    let total_steps = plan.iter().map(Vec::len).sum::<usize>().max(1);
    let mut step = 0;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    model.set_mode(Mode::Train);
    for (epoch, batches) in plan.iter().enumerate() {
        let aug = cfg.augment.as_ref().map(|a| AugmentConfig {
            seed: rng::derive_seed(cfg.seed, &format!("supervised/augment/epoch{epoch}")),
            ..a.clone()
        });
        let epoch_lr = cosine_lr(step, total_steps, &sgd)?;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in batches {
            let lr = cosine_lr(step, total_steps, &sgd)?;
            let views: Vec<GrayImage> = match &aug {
                Some(a) => batch
                    .iter()
                    .map(|&i| augment_view(&data.images[i], a, i as u64, 0))
                    .collect::<Result<_>>()?,
                None => batch.iter().map(|&i| data.images[i].clone()).collect(),
            };
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(image_batch(&views.iter().collect::<Vec<_>>())?);
            let logits = model.forward(&mut tape, x)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Degenerate(format!(
                    "non-finite loss at epoch {}",
                    epoch + 1
                )));
            }
            loss_sum += value * batch.len() as f64;
            correct += argmax_rows(tape.value(logits).data(), data.classes)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            seen += batch.len();
            let grads = tape.backward(loss)?;
            model.absorb(&grads);
            model.commit_running_stats(&tape);
            sgd_step(model, &mut sgd, lr)?;
            model.zero_grad();
            step += 1;
        }
        let n = seen.max(1) as f64;
        let record = SupervisedEpoch {
            epoch: epoch + 1,
            loss: loss_sum / n,
            train_acc: correct as f64 / n,
            lr: epoch_lr,
        };
        on_epoch(&record);
        metrics.push(record);
    }
    model.set_mode(Mode::Eval);
    Ok(metrics)
}

fn argmax_rows(data: &[f64], classes: usize) -> Vec<usize> {
    data.chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Eval-mode class predictions.
pub fn predict(model: &RepVggNet, images: &[GrayImage]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        let mut tape = Tape::inference();
        let x = tape.constant(image_batch(&[img])?);
        let logits = model.forward(&mut tape, x)?;
        out.extend(argmax_rows(tape.value(logits).data(), model.num_classes()));
    }
    Ok(out)
}

/// Unit-norm pooled penultimate features of one image. Works on either
/// form; the fused form is the inference path.
pub fn embed_supervised(model: &RepVggNet, img: &GrayImage) -> Result<Vec<f64>> {
    let mut tape = Tape::inference();
    let x = tape.constant(image_batch(&[img])?);
    let f = model.features(&mut tape, x)?;
    let e = tape.l2_normalize(f)?;
    Ok(tape.value(e).data().to_vec())
}

pub const CHECKPOINT_KIND: &str = "supervised";

pub fn supervised_checkpoint(model: &RepVggNet) -> Checkpoint {
    Checkpoint::from_module(model)
        .with_meta("kind", CHECKPOINT_KIND)
        .with_meta("plan", model.plan.to_string())
        .with_meta("classes", model.num_classes().to_string())
        .with_meta("fused", model.is_fused().to_string())
}

/// Saves whichever form `model` is in.
pub fn save_supervised(model: &RepVggNet, path: impl AsRef<Path>) -> Result<()> {
    supervised_checkpoint(model).save(path)
}

/// Re-parameterizes every block and writes the single-branch network.
pub fn export_fused(model: &RepVggNet, path: impl AsRef<Path>) -> Result<RepVggNet> {
    let fused = model.reparameterize()?;
    save_supervised(&fused, path)?;
    Ok(fused)
}

pub fn supervised_from_checkpoint(ckpt: &Checkpoint) -> Result<RepVggNet> {
    let kind = ckpt.require_meta("kind")?;
    if kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!(
            "expected a `{CHECKPOINT_KIND}` checkpoint, found `{kind}`"
        )));
    }
    let plan: StagePlan = ckpt.require_meta("plan")?.parse()?;
    let classes: usize = ckpt
        .require_meta("classes")?
        .parse()
        .map_err(|_| Error::Checkpoint("malformed classes".into()))?;
    let mut model = match ckpt.require_meta("fused")? {
        "true" => RepVggNet::fused_skeleton(&plan, classes)?,
        "false" => build_net(&plan, classes, &mut rng::stream(0, "supervised/skeleton"))?,
        other => return Err(Error::Checkpoint(format!("malformed fused flag `{other}`"))),
    };
    ckpt.load_into(&mut model)?;
    model.set_mode(Mode::Eval);
    Ok(model)
}

/// Loads a supervised checkpoint in either form.
pub fn load_supervised(path: impl AsRef<Path>) -> Result<RepVggNet> {
    supervised_from_checkpoint(&Checkpoint::load(path)?)
}

/// Loads a checkpoint and returns its fused form, fusing on the fly if the
/// file holds the training form.
pub fn load_fused(path: impl AsRef<Path>) -> Result<RepVggNet> {
    let m = load_supervised(path)?;
    if m.is_fused() {
        Ok(m)
    } else {
        m.reparameterize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_picks_first_maximum() {
        assert_eq!(argmax_rows(&[0.0, 2.0, 2.0, 5.0, 1.0, 1.0], 3), vec![1, 0]);
    }

    #[test]
    fn dataset_validation() {
        let img = GrayImage::filled(4, 4, 0).unwrap();
        assert!(LabeledDataset::new(vec!["a".into()], vec![img.clone()], vec![2], 2).is_err());
        assert!(LabeledDataset::new(
            vec!["a".into(), "a".into()],
            vec![img.clone(), img],
            vec![0, 1],
            2
        )
        .is_err());
    }
}
