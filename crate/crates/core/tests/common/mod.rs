//! Independent reference implementations and measurement helpers shared by
//! the integration suites. Nothing here calls the kernel under test to
//! compute an expected value.
#![allow(dead_code)]

use glyphsieve::imageops::GrayImage;
use glyphsieve::index::{EmbeddingRecord, FeatureStore, Source};
use glyphsieve::repvgg::{build_net, ConvBnBranch, RepVggBlock, StagePlan};
use glyphsieve::rng::{self, Rng};
use glyphsieve::simsiam::{symmetric_loss, Predictor, SimSiamModel};
use glyphsieve::tensor::{BatchNorm, Mode, Module, Tape, Tensor, Var};
use rand::Rng as _;

pub fn randn(shape: &[usize], r: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// Six nested loops over output channel, batch, output row/column, input
/// channel and kernel taps.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for oc in 0..o {
        for ni in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for (di, dj) in (0..k).flat_map(|di| (0..k).map(move |dj| (di, dj))) {
                            let (r, s) = (
                                (i * stride + di) as isize - pad as isize,
                                (j * stride + dj) as isize - pad as isize,
                            );
                            if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                continue;
                            }
                            acc += x.data()[((ni * c + ic) * h + r as usize) * wd + s as usize]
                                * w.data()[((oc * c + ic) * k + di) * k + dj];
                        }
                    }
                    out[((ni * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

/// Relative error with a floor on the denominator so that gradients near
/// zero are judged on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

pub const FD_STEP: f64 = 1e-5;

/// Builds `f` on fresh tapes and compares the tape gradient of every input
/// element against a central difference. Returns the largest relative error.
pub fn gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Random values bounded away from zero, so ReLU kinks sit outside the
/// finite-difference stencil.
pub fn off_kink(shape: &[usize], r: &mut Rng) -> Tensor {
    let mut t = randn(shape, r);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1 * v.signum();
        }
    }
    t
}

/// Weighted sum with fixed random weights, turning any tensor into a scalar
/// whose gradient exercises every output element.
pub fn probe(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(randn(&shape, &mut rng::stream(seed, "probe")));
    let m = tape.mul(y, w).unwrap();
    tape.sum(m)
}

/// Relative finite-difference error for every layer primitive at `seed`.
pub fn primitive_gradchecks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng::stream(seed, "gradcheck/inputs");
    let mut out = Vec::new();
    let x4 = randn(&[2, 3, 5, 5], &mut r);
    let w = randn(&[4, 3, 3, 3], &mut r);
    let b = randn(&[4], &mut r);
    out.push((
        "conv2d",
        gradcheck(&[x4.clone(), w.clone(), b.clone()], &|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
            probe(t, y, seed)
        }),
    ));
    let w1 = randn(&[2, 3, 1, 1], &mut r);
    out.push((
        "conv2d_1x1",
        gradcheck(&[x4.clone(), w1], &|t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 0).unwrap();
            probe(t, y, seed)
        }),
    ));
    let g = randn(&[3], &mut r);
    let be = randn(&[3], &mut r);
    out.push((
        "batch_norm_train",
        gradcheck(&[x4.clone(), g.clone(), be.clone()], &|t, v| {
            let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
            probe(t, y, seed)
        }),
    ));
    let mean: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..3).map(|_| r.random_range(0.5..2.0)).collect();
    out.push((
        "batch_norm_eval",
        gradcheck(&[x4.clone(), g, be], &|t, v| {
            let y = t
                .batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
                .unwrap();
            probe(t, y, seed)
        }),
    ));
    out.push((
        "relu",
        gradcheck(&[off_kink(&[3, 4], &mut r)], &|t, v| {
            let y = t.relu(v[0]);
            probe(t, y, seed)
        }),
    ));
    let (a, c) = (randn(&[3, 4], &mut r), randn(&[3, 4], &mut r));
    out.push((
        "add",
        gradcheck(&[a.clone(), c.clone()], &|t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            probe(t, y, seed)
        }),
    ));
    out.push((
        "mul",
        gradcheck(&[a.clone(), c.clone()], &|t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            probe(t, y, seed)
        }),
    ));
    out.push((
        "scale",
        gradcheck(std::slice::from_ref(&a), &|t, v| {
            let y = t.scale(v[0], -1.7);
            probe(t, y, seed)
        }),
    ));
    out.push((
        "sum",
        gradcheck(std::slice::from_ref(&a), &|t, v| t.sum(v[0])),
    ));
    out.push((
        "mean",
        gradcheck(std::slice::from_ref(&a), &|t, v| t.mean(v[0])),
    ));
    out.push((
        "global_avg_pool",
        gradcheck(&[x4], &|t, v| {
            let y = t.global_avg_pool(v[0]).unwrap();
            probe(t, y, seed)
        }),
    ));
    let (lw, lb) = (randn(&[5, 4], &mut r), randn(&[5], &mut r));
    out.push((
        "linear",
        gradcheck(&[a.clone(), lw, lb], &|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
            probe(t, y, seed)
        }),
    ));
    out.push((
        "l2_normalize",
        gradcheck(std::slice::from_ref(&a), &|t, v| {
            let y = t.l2_normalize(v[0]).unwrap();
            probe(t, y, seed)
        }),
    ));
    out.push((
        "cosine_similarity",
        gradcheck(&[a.clone(), c.clone()], &|t, v| {
            let y = t.cosine_similarity(v[0], v[1]).unwrap();
            probe(t, y, seed)
        }),
    ));
    let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
    out.push((
        "cross_entropy",
        gradcheck(&[a], &|t, v| t.cross_entropy(v[0], &labels).unwrap()),
    ));
    out
}

pub fn tiny_plan() -> StagePlan {
    StagePlan::new(1, vec![4, 6], vec![1, 1]).unwrap()
}

pub fn tiny_model(seed: u64) -> SimSiamModel {
    SimSiamModel::new(&tiny_plan(), 8, &mut rng::stream(seed, "tiny-model")).unwrap()
}

/// Finite-difference check of the full contrastive loss with respect to a
/// random sample of model parameters and every input pixel of both views.
pub fn simsiam_loss_gradcheck(seed: u64, coords: usize) -> f64 {
    let mut model = tiny_model(seed);
    let mut r = rng::stream(seed, "gradcheck/simsiam");
    let x1 = randn(&[4, 1, 6, 6], &mut r);
    let x2 = randn(&[4, 1, 6, 6], &mut r);
    let (_, tape, loss) = {
        let mut t = Tape::new();
        let (va, vb) = (t.constant(x1.clone()), t.constant(x2.clone()));
        let out = model.pair_loss(&mut t, va, vb).unwrap();
        (t.value(out.loss).item(), t, out)
    };
    // Targets frozen at the base point: finite differences of this function
    // equal the stop-gradient loss's true gradient there, whereas differencing
    // the full loss would also move the detached targets.
    let (z1, z2) = (tape.value(loss.z1).clone(), tape.value(loss.z2).clone());
    let grads = tape.backward(loss.loss).unwrap();
    model.absorb(&grads);
    let frozen = |m: &SimSiamModel, t: &mut Tape, a: Var, b: Var| {
        let (_, p1) = m.project(t, a).unwrap();
        let (_, p2) = m.project(t, b).unwrap();
        let (c1, c2) = (t.constant(z1.clone()), t.constant(z2.clone()));
        symmetric_loss(t, p1, c1, p2, c2).unwrap()
    };
    let loss_of = |m: &SimSiamModel| {
        let mut t = Tape::new();
        let (va, vb) = (t.constant(x1.clone()), t.constant(x2.clone()));
        let l = frozen(m, &mut t, va, vb);
        t.value(l).item()
    };
    let mut worst = gradcheck(&[x1.clone(), x2.clone()], &|t, v| {
        frozen(&model, t, v[0], v[1])
    });

    let mut sites = Vec::new();
    model.visit("", &mut |name, p| {
        if p.trainable {
            for j in 0..p.value.numel() {
                sites.push((
                    name.to_string(),
                    j,
                    p.grad.as_ref().map_or(0.0, |g| g.data()[j]),
                ));
            }
        }
    });
    for _ in 0..coords {
        let (name, j, analytic) = sites[r.random_range(0..sites.len())].clone();
        let nudge = |m: &mut SimSiamModel, delta: f64| {
            m.visit_mut("", &mut |n, p| {
                if n == name {
                    p.value.data_mut()[j] += delta;
                }
            });
        };
        nudge(&mut model, FD_STEP);
        let up = loss_of(&model);
        nudge(&mut model, -2.0 * FD_STEP);
        let down = loss_of(&model);
        nudge(&mut model, FD_STEP);
        worst = worst.max(rel_err(analytic, (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

/// Randomizes every batch norm's affine parameters and running statistics
/// and switches the module to eval mode.
pub fn randomize_batch_norms(m: &mut dyn Module, r: &mut Rng) {
    m.visit_mut("", &mut |name, p| {
        let range = if name.ends_with("gamma") {
            0.5..1.5
        } else if name.ends_with("beta") || name.ends_with("running_mean") {
            -0.5..0.5
        } else if name.ends_with("running_var") {
            0.5..2.0
        } else {
            return;
        };
        for v in p.value.data_mut() {
            *v = r.random_range(range.clone());
        }
    });
    m.set_mode(Mode::Eval);
}

pub fn random_bn(c: usize, r: &mut Rng) -> BatchNorm {
    BatchNorm::from_stats(
        (0..c).map(|_| r.random_range(0.5..1.5)).collect(),
        (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
        (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
        (0..c).map(|_| r.random_range(0.5..2.0)).collect(),
        BatchNorm::DEFAULT_EPS,
    )
    .unwrap()
}

/// Brute-force histogram equalization: for every pixel, count the pixels at
/// or below its level and scale the fraction to 255, rounding half away
/// from zero.
pub fn equalize_oracle(img: &GrayImage) -> Vec<u8> {
    let px = img.pixels();
    let total = px.len() as f64;
    px.iter()
        .map(|&v| {
            let at_or_below = px.iter().filter(|&&u| u <= v).count() as f64;
            let s = 255.0 * at_or_below / total;
            // f64::round rounds half away from zero
            s.round() as u8
        })
        .collect()
}

pub fn random_image(w: usize, h: usize, r: &mut Rng) -> GrayImage {
    GrayImage::new(w, h, (0..w * h).map(|_| r.random::<u8>()).collect()).unwrap()
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// A random store whose vectors are drawn from a small lattice so that
/// exact score ties occur, plus verbatim duplicates under other ids.
pub fn tie_heavy_store(n: usize, dim: usize, r: &mut Rng) -> FeatureStore {
    let mut s = FeatureStore::new(dim, Source::Unsupervised, None).unwrap();
    let mut made: Vec<Vec<f64>> = Vec::new();
    let mut ids: Vec<usize> = (0..n).collect();
    // ids are inserted in shuffled order so ties are not pre-sorted
    for i in (1..n).rev() {
        ids.swap(i, r.random_range(0..=i));
    }
    for id in ids {
        let v = if !made.is_empty() && r.random_bool(0.2) {
            made[r.random_range(0..made.len())].clone()
        } else {
            let mut v: Vec<f64> = (0..dim).map(|_| r.random_range(-2i32..=2) as f64).collect();
            if v.iter().all(|&x| x == 0.0) {
                v[0] = 1.0;
            }
            unit(v)
        };
        made.push(v.clone());
        s.push(EmbeddingRecord {
            id: format!("g{id:04}"),
            label: Some(id % 5),
            vector: v,
        })
        .unwrap();
    }
    s
}

/// Full ranking by exhaustive scoring and a selection sort on
/// (score descending, id ascending), scores clipped to [−1, 1].
pub fn ranking_oracle(store: &FeatureStore, q: &[f64]) -> Vec<(String, f64)> {
    let mut rows: Vec<(String, f64)> = store
        .records()
        .iter()
        .map(|rec| {
            let mut d = 0.0;
            for i in 0..q.len() {
                d += q[i] * rec.vector[i];
            }
            (rec.id.clone(), d.clamp(-1.0, 1.0))
        })
        .collect();
    for i in 0..rows.len() {
        let mut best = i;
        for j in i + 1..rows.len() {
            let (a, b) = (&rows[j], &rows[best]);
            if a.1 > b.1 || (a.1 == b.1 && a.0 < b.0) {
                best = j;
            }
        }
        rows.swap(i, best);
    }
    rows
}

/// Returns the loss of `model` on identical views with its predictor forced
/// to the identity.
pub fn forced_identity_loss(seed: u64) -> f64 {
    let mut model = tiny_model(seed);
    model.predictor = Predictor::Identity;
    let x = randn(&[4, 1, 6, 6], &mut rng::stream(seed, "forced"));
    let mut t = Tape::new();
    let (a, b) = (t.constant(x.clone()), t.constant(x));
    let out = model.pair_loss(&mut t, a, b).unwrap();
    t.value(out.loss).item()
}

/// Leaf-level stop-gradient probe: returns the gradients reaching the
/// projection leaves with and without the detach.
pub fn stop_gradient_probe(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::stream(seed, "sg-probe");
    let (p1, z1, p2, z2) = (
        randn(&[3, 5], &mut r),
        randn(&[3, 5], &mut r),
        randn(&[3, 5], &mut r),
        randn(&[3, 5], &mut r),
    );
    let mut t = Tape::new();
    let v: Vec<Var> = [&p1, &z1, &p2, &z2]
        .iter()
        .map(|x| t.constant((*x).clone()))
        .collect();
    let loss = symmetric_loss(&mut t, v[0], v[1], v[2], v[3]).unwrap();
    let g = t.backward(loss).unwrap();
    let detached: Vec<f64> = [v[1], v[3]]
        .iter()
        .flat_map(|&z| g.get(z).map_or(vec![0.0; 15], |t| t.data().to_vec()))
        .collect();

    let mut t = Tape::new();
    let v: Vec<Var> = [&p1, &z1, &p2, &z2]
        .iter()
        .map(|x| t.constant((*x).clone()))
        .collect();
    let c1 = t.cosine_similarity(v[0], v[3]).unwrap();
    let c2 = t.cosine_similarity(v[2], v[1]).unwrap();
    let (m1, m2) = (t.mean(c1), t.mean(c2));
    let s = t.add(m1, m2).unwrap();
    let loss = t.scale(s, -0.5);
    let g = t.backward(loss).unwrap();
    let attached: Vec<f64> = [v[1], v[3]]
        .iter()
        .flat_map(|&z| g.get(z).unwrap().data().to_vec())
        .collect();
    (detached, attached)
}

/// Eval-mode batch norm written out per element:
/// `γ·(x − μ)/√(σ² + eps) + β`.
pub fn bn_oracle(x: &Tensor, bn: &BatchNorm) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let plane = x.numel() / (n * c);
    let (g, b) = (bn.gamma.value.data(), bn.beta.value.data());
    let (m, v) = (bn.running_mean.value.data(), bn.running_var.value.data());
    let mut out = x.clone();
    for (i, val) in out.data_mut().iter_mut().enumerate() {
        let ch = (i / plane) % c;
        *val = g[ch] * (*val - m[ch]) / (v[ch] + bn.eps).sqrt() + b[ch];
    }
    out
}

pub fn branch_oracle(branch: &ConvBnBranch, x: &Tensor) -> Tensor {
    let w = &branch.conv.weight.value;
    let k = w.shape()[2];
    bn_oracle(
        &naive_conv(x, w, None, branch.conv.stride, k / 2),
        &branch.bn,
    )
}

/// Training-form block output with frozen statistics, from the oracles
/// above.
pub fn block_oracle(block: &RepVggBlock, x: &Tensor) -> Tensor {
    let mut sum = branch_oracle(&block.dense, x);
    let mut parts = vec![branch_oracle(&block.pointwise, x)];
    if let Some(bn) = &block.identity {
        parts.push(bn_oracle(x, bn));
    }
    for p in parts {
        sum.data_mut()
            .iter_mut()
            .zip(p.data())
            .for_each(|(a, b)| *a += b);
    }
    sum.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    sum
}

/// A block with random channel counts up to 16, random stride, random
/// frozen statistics, and an input batch for it. About half of the blocks
/// carry an identity branch.
pub fn random_block(r: &mut Rng) -> (RepVggBlock, Tensor) {
    let cin = r.random_range(1..=16);
    let (cout, stride) = if r.random_bool(0.5) {
        (cin, 1)
    } else {
        (r.random_range(1..=16), r.random_range(1..=2))
    };
    let mut block = RepVggBlock::new(cin, cout, stride, r);
    randomize_batch_norms(&mut block, r);
    let side = r.random_range(3..=9);
    let x = randn(
        &[
            r.random_range(1..=3),
            cin,
            side,
            side + r.random_range(0..=2),
        ],
        r,
    );
    (block, x)
}

/// A conv+BN branch with a random kernel size (1 or 3), stride and frozen
/// statistics, and an input batch for it.
pub fn random_branch(r: &mut Rng) -> (ConvBnBranch, Tensor) {
    let cin = r.random_range(1..=16);
    let cout = r.random_range(1..=16);
    let k = if r.random_bool(0.5) { 1 } else { 3 };
    let mut b = ConvBnBranch::new(cin, cout, k, r.random_range(1..=2), r);
    b.bn = random_bn(cout, r);
    let side = r.random_range(3..=9);
    (b, randn(&[r.random_range(1..=3), cin, side, side], r))
}

/// Largest elementwise gap between a block's fused form and the training
/// form, measured against both the oracle and the library's own eval-mode
/// forward pass.
pub fn block_fusion_deviation(block: &RepVggBlock, x: &Tensor) -> f64 {
    let fused = block.reparameterize().unwrap();
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let f = fused.forward(&mut t, v).unwrap();
    let train = block.forward(&mut t, v).unwrap();
    let oracle = block_oracle(block, x);
    t.value(f)
        .max_abs_diff(&oracle)
        .max(t.value(f).max_abs_diff(t.value(train)))
}

/// Logit gap between the default-plan network with random frozen
/// statistics and its fused form, on a random 32×32 batch.
pub fn net_fusion_deviation(seed: u64) -> f64 {
    let mut r = rng::stream(seed, "net-fusion");
    let mut net = build_net(&StagePlan::default(), 8, &mut r).unwrap();
    randomize_batch_norms(&mut net, &mut r);
    let fused = net.reparameterize().unwrap();
    let x = randn(&[2, 1, 32, 32], &mut r);
    let mut t = Tape::new();
    let v = t.constant(x);
    let a = net.forward(&mut t, v).unwrap();
    let b = fused.forward(&mut t, v).unwrap();
    t.value(a).max_abs_diff(t.value(b))
}

pub fn random_unit(dim: usize, r: &mut Rng) -> Vec<f64> {
    unit((0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// Fused ranking computed id by id: look each id up in both stores, weigh
/// the two clipped dot products, and order by (score desc, id asc).
pub fn fused_oracle(
    su: &FeatureStore,
    ss: &FeatureStore,
    qu: &[f64],
    qs: &[f64],
    w: (f64, f64),
) -> Vec<(String, f64)> {
    let score = |store: &FeatureStore, id: &str, q: &[f64]| {
        let v = &store.get(id).unwrap().vector;
        q.iter()
            .zip(v)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .clamp(-1.0, 1.0)
    };
    let mut rows: Vec<(String, f64)> = su
        .records()
        .iter()
        .map(|rec| {
            let (a, b) = (score(su, &rec.id, qu), score(ss, &rec.id, qs));
            (
                rec.id.clone(),
                (w.0 * a + w.1 * b).clamp(a.min(b), a.max(b)),
            )
        })
        .collect();
    rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    rows
}

/// Random image of random size whose pixels come from a handful of levels,
/// so histograms are lumpy rather than near uniform.
pub fn lumpy_image(r: &mut Rng) -> GrayImage {
    let (w, h) = (r.random_range(1..=40), r.random_range(1..=40));
    let levels: Vec<u8> = (0..r.random_range(1..=12)).map(|_| r.random()).collect();
    GrayImage::new(
        w,
        h,
        (0..w * h)
            .map(|_| levels[r.random_range(0..levels.len())])
            .collect(),
    )
    .unwrap()
}

/// Per-pixel power law on normalized intensities, written directly.
pub fn gamma_oracle(img: &GrayImage, gain: f64, gamma: f64) -> Vec<u8> {
    img.pixels()
        .iter()
        .map(|&v| ((gain * (v as f64 / 255.0).powf(gamma)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}
