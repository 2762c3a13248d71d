mod common;

use common::*;
use glyphsieve::data::{render_dataset, SynthSpec};
use glyphsieve::imageops::{AugmentConfig, GrayImage};
use glyphsieve::simsiam::{
    encoder_checkpoint, encoder_from_checkpoint, load_encoder, save_encoder, train_simsiam,
    SimSiamConfig,
};
use glyphsieve::supervised::{
    embed_supervised, load_supervised, predict, save_supervised, supervised_checkpoint,
    train_supervised, LabeledDataset, SupervisedConfig,
};
use glyphsieve::tensor::{Checkpoint, Module, Tensor};
use glyphsieve::Error;

fn tiny_set(classes: usize, per: usize) -> (Vec<GrayImage>, Vec<usize>) {
    let spec = SynthSpec {
        classes,
        samples_per_class: per,
        width: 12,
        height: 12,
        ..SynthSpec::default()
    };
    let glyphs = render_dataset(&spec).unwrap();
    (
        glyphs.iter().map(|g| g.image.clone()).collect(),
        glyphs.iter().map(|g| g.class).collect(),
    )
}

fn dataset(classes: usize, per: usize) -> LabeledDataset {
    let (images, labels) = tiny_set(classes, per);
    let ids = (0..images.len()).map(|i| format!("s{i}")).collect();
    LabeledDataset::new(ids, images, labels, classes).unwrap()
}

fn simsiam_cfg(epochs: usize) -> SimSiamConfig {
    SimSiamConfig {
        plan: tiny_plan(),
        proj_width: 8,
        epochs,
        batch_size: 4,
        seed: 3,
        ..SimSiamConfig::default()
    }
}

fn sup_cfg(epochs: usize) -> SupervisedConfig {
    SupervisedConfig {
        plan: tiny_plan(),
        epochs,
        batch_size: 4,
        seed: 3,
        ..SupervisedConfig::default()
    }
}

fn trainable(m: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit("", &mut |n, p| {
        if p.trainable {
            out.push((n.to_string(), p.value.clone()))
        }
    });
    out
}

#[test]
fn zero_learning_rate_leaves_weights_bit_identical() {
    let (images, _) = tiny_set(2, 4);
    let cfg = SimSiamConfig {
        base_lr: 0.0,
        ..simsiam_cfg(2)
    };
    let fresh = glyphsieve::simsiam::SimSiamModel::new(
        &cfg.plan,
        cfg.proj_width,
        &mut glyphsieve::rng::stream(cfg.seed, "simsiam/init"),
    )
    .unwrap();
    let (trained, metrics) = train_simsiam(&images, &cfg).unwrap();
    assert_eq!(trainable(&trained), trainable(&fresh));
    assert!(metrics.iter().all(|m| m.lr == 0.0));

    let data = dataset(2, 4);
    let cfg = SupervisedConfig {
        base_lr: 0.0,
        ..sup_cfg(2)
    };
    let fresh = glyphsieve::repvgg::build_net(
        &cfg.plan,
        2,
        &mut glyphsieve::rng::stream(cfg.seed, "supervised/init"),
    )
    .unwrap();
    let (trained, _) = train_supervised(&data, &cfg).unwrap();
    assert_eq!(trainable(&trained), trainable(&fresh));
}

#[test]
fn training_is_deterministic() {
    let (images, _) = tiny_set(2, 4);
    let (a, ma) = train_simsiam(&images, &simsiam_cfg(2)).unwrap();
    let (b, mb) = train_simsiam(&images, &simsiam_cfg(2)).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(
        encoder_checkpoint(&a).to_bytes(),
        encoder_checkpoint(&b).to_bytes()
    );
    let (c, _) = train_simsiam(
        &images,
        &SimSiamConfig {
            seed: 4,
            ..simsiam_cfg(2)
        },
    )
    .unwrap();
    assert_ne!(
        encoder_checkpoint(&a).to_bytes(),
        encoder_checkpoint(&c).to_bytes()
    );

    let data = dataset(2, 4);
    let (a, ma) = train_supervised(&data, &sup_cfg(2)).unwrap();
    let (b, mb) = train_supervised(&data, &sup_cfg(2)).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(
        supervised_checkpoint(&a).to_bytes(),
        supervised_checkpoint(&b).to_bytes()
    );
}

#[test]
fn first_epoch_reports_initial_rate() {
    let (images, _) = tiny_set(2, 4);
    let cfg = SimSiamConfig {
        base_lr: 0.64,
        ..simsiam_cfg(3)
    };
    let (_, m) = train_simsiam(&images, &cfg).unwrap();
    assert_eq!(m[0].lr, 0.64 * 4.0 / 256.0);
    assert!(m[1].lr < m[0].lr && m[2].lr < m[1].lr);
    assert!(m
        .iter()
        .all(|e| e.mean_loss.is_finite() && (-1.0..=1.0).contains(&e.mean_loss)));
    assert!(m.iter().all(|e| e.embed_std > 0.0));
}

#[test]
fn supervised_net_memorizes_ten_samples() {
    let data = dataset(2, 5);
    let cfg = SupervisedConfig {
        epochs: 60,
        batch_size: 10,
        base_lr: 2.56,
        augment: None,
        ..sup_cfg(0)
    };
    let (model, metrics) = train_supervised(&data, &cfg).unwrap();
    assert_eq!(metrics.last().unwrap().train_acc, 1.0);
    assert_eq!(predict(&model, &data.images).unwrap(), data.labels);
    let fused = model.reparameterize().unwrap();
    assert_eq!(predict(&fused, &data.images).unwrap(), data.labels);
}

#[test]
fn saved_models_embed_bit_exactly() {
    let (images, _) = tiny_set(2, 4);
    let dir = tempfile::tempdir().unwrap();
    let (enc, _) = train_simsiam(&images, &simsiam_cfg(1)).unwrap();
    save_encoder(&enc, dir.path().join("e.ckpt")).unwrap();
    let loaded = load_encoder(dir.path().join("e.ckpt")).unwrap();
    for img in &images {
        assert_eq!(enc.embed(img).unwrap(), loaded.embed(img).unwrap());
    }

    let (net, _) = train_supervised(&dataset(2, 4), &sup_cfg(1)).unwrap();
    save_supervised(&net, dir.path().join("s.ckpt")).unwrap();
    let loaded = load_supervised(dir.path().join("s.ckpt")).unwrap();
    assert!(!loaded.is_fused());
    for img in &images {
        assert_eq!(
            embed_supervised(&net, img).unwrap(),
            embed_supervised(&loaded, img).unwrap()
        );
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (enc, _) = train_simsiam(&tiny_set(2, 2).0, &simsiam_cfg(1)).unwrap();
    let mut bytes = encoder_checkpoint(&enc).to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra)
        .unwrap_err()
        .to_string()
        .contains("trailing"));
    bytes[0] = b'X';
    let err = Checkpoint::from_bytes(&bytes).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)) && err.to_string().contains("magic"));
}

#[test]
fn encoder_loader_audits_entry_names() {
    let net =
        glyphsieve::repvgg::build_net(&tiny_plan(), 2, &mut glyphsieve::rng::stream(0, "audit"))
            .unwrap();
    let ckpt = supervised_checkpoint(&net);
    assert!(encoder_from_checkpoint(&ckpt)
        .unwrap_err()
        .to_string()
        .contains("simsiam"));
    // even relabelled, the parameter names give it away
    let disguised = ckpt
        .with_meta("kind", "simsiam")
        .with_meta("proj_width", "8");
    let err = encoder_from_checkpoint(&disguised).unwrap_err();
    assert!(err.to_string().contains("missing entries"), "{err}");
}

#[test]
fn training_rejects_bad_inputs() {
    assert!(train_simsiam(&[], &simsiam_cfg(1)).is_err());
    let (images, _) = tiny_set(2, 2);
    assert!(train_simsiam(
        &images,
        &SimSiamConfig {
            batch_size: 1,
            ..simsiam_cfg(1)
        }
    )
    .is_err());
    let bad_aug = SimSiamConfig {
        augment: AugmentConfig {
            rotation_range_deg: (10.0, -10.0),
            ..AugmentConfig::default()
        },
        ..simsiam_cfg(1)
    };
    assert!(train_simsiam(&images, &bad_aug).is_err());
    assert!(LabeledDataset::new(vec!["a".into()], images[..1].to_vec(), vec![2], 2).is_err());
}
