mod common;

use common::*;
use glyphsieve::rng;
use glyphsieve::tensor::{Parameter, Tape, Tensor};
use glyphsieve::Error;

#[test]
fn conv_matches_six_loop_oracle() {
    let mut r = rng::stream(7, "conv-oracle");
    for &(n, c, o, h, w, k, stride, pad) in &[
        (2, 3, 4, 7, 7, 3, 1, 1),
        (2, 3, 4, 8, 6, 3, 2, 1),
        (1, 2, 5, 9, 9, 1, 1, 0),
        (3, 1, 2, 5, 5, 1, 2, 0),
        (1, 4, 3, 6, 7, 5, 1, 2),
        (2, 2, 2, 4, 4, 3, 1, 0),
    ] {
        let x = randn(&[n, c, h, w], &mut r);
        let wt = randn(&[o, c, k, k], &mut r);
        let b = randn(&[o], &mut r);
        let mut tape = Tape::new();
        let (vx, vw, vb) = (
            tape.constant(x.clone()),
            tape.constant(wt.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.conv2d(vx, vw, Some(vb), stride, pad).unwrap();
        let expected = naive_conv(&x, &wt, Some(&b), stride, pad);
        assert_eq!(tape.value(y).shape(), expected.shape());
        assert!(tape.value(y).max_abs_diff(&expected) < 1e-12);
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(Tensor::zeros(&[3, 1, 3, 3]));
    assert!(matches!(
        tape.conv2d(x, w, None, 1, 1),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn every_primitive_passes_finite_differences() {
    for seed in 0..3 {
        for (name, err) in primitive_gradchecks(seed) {
            assert!(err < 1e-4, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn contrastive_loss_passes_finite_differences() {
    for seed in 0..2 {
        let err = simsiam_loss_gradcheck(seed, 60);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn backward_needs_a_scalar() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, -2.0, 3.0]));
    let s = tape.stop_gradient(x);
    let y = tape.mul(x, s).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    // d/dx of x·sg(x) is sg(x), not 2x
    assert_eq!(g.get(x).unwrap().data(), &[1.0, -2.0, 3.0]);
}

#[test]
fn shared_parameter_accumulates_and_unused_parameter_gets_zero() {
    let p = Parameter::new(Tensor::vector(vec![2.0, 3.0]));
    let unused = Parameter::new(Tensor::vector(vec![5.0]));
    let mut tape = Tape::new();
    let a = tape.param(&p);
    let b = tape.param(&p);
    assert_eq!(a, b);
    tape.param(&unused);
    let y = tape.mul(a, b).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.param(p.id()).unwrap().data(), &[4.0, 6.0]);
    assert_eq!(g.param(unused.id()).unwrap().data(), &[0.0]);
}

#[test]
fn cross_entropy_closed_forms() {
    for classes in [2usize, 3, 8, 10] {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::full(&[4, classes], 0.37));
        let loss = tape.cross_entropy(logits, &[0, 1, 1, 0]).unwrap();
        assert_eq!(tape.value(loss).item(), (classes as f64).ln());
    }
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::new(&[1, 3], vec![0.0, 800.0, 0.0]).unwrap());
    let loss = tape.cross_entropy(logits, &[1]).unwrap();
    assert!(tape.value(loss).item() < 1e-300);
    assert!(tape.cross_entropy(logits, &[3]).is_err());
}

#[test]
fn cross_entropy_matches_direct_summation() {
    let mut r = rng::stream(3, "ce-oracle");
    for _ in 0..20 {
        let x = randn(&[5, 6], &mut r);
        let labels = [0usize, 5, 2, 2, 3];
        let mut expected = 0.0;
        for (row, &l) in x.data().chunks(6).zip(&labels) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expected -= (row[l].exp() / z).ln();
        }
        expected /= 5.0;
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let loss = tape.cross_entropy(v, &labels).unwrap();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
        assert!(tape.value(loss).item() >= 0.0);
        // ∂/∂logits = (softmax − onehot)/N, so each row of N·grad sums to 0
        let g = tape.backward(loss).unwrap();
        for row in g.get(v).unwrap().data().chunks(6) {
            assert!((row.iter().sum::<f64>() * 5.0).abs() < 1e-12);
        }
    }
}

#[test]
fn degenerate_vectors_are_reported() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    assert!(matches!(tape.l2_normalize(z), Err(Error::Degenerate(_))));
    let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
    assert!(matches!(
        tape.cosine_similarity(a, z),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn contrastive_loss_contracts() {
    for seed in 0..3 {
        assert_eq!(forced_identity_loss(seed), -1.0);
        let (detached, attached) = stop_gradient_probe(seed);
        assert!(detached.iter().all(|&g| g == 0.0));
        assert!(attached.iter().any(|&g| g != 0.0));
    }
}
