//! Contrastive pre-training with a Siamese encoder.
//!
//! Two augmented views of each image pass through a shared residual
//! backbone and a three-layer projection MLP (`z`), then a bottleneck
//! prediction MLP (`p`). The loss
//! `½·D(p₁, sg(z₂)) + ½·D(p₂, sg(z₁))` with `D(p, z) = −cos(p, z)` matches each
//! prediction to the *detached* projection of the other view; the detach is
//! what keeps the representation from collapsing without negative pairs.
//!
//! Retrieval uses the pooled backbone features (before the projector).

use std::path::Path;

use serde::Serialize;

use crate::data::{image_batch, shuffled_batches};
use crate::error::{Error, Result};
use crate::imageops::{augment_pair, AugmentConfig, GrayImage};
use crate::repvgg::StagePlan;
use crate::rng::{self, Rng};
use crate::tensor::nn::join;
use crate::tensor::{
    cosine_lr, sgd_step, BatchNorm, Checkpoint, Conv2d, Linear, Mode, Module, Parameter, SgdState,
    Tape, Var,
};

/// Basic residual block: two 3×3 conv+BN with a skip connection, ReLU after
/// the sum. The skip is a 1×1 conv+BN when the shape changes.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl ResidualBlock {
    pub fn new(cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Self {
        Self {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, false, rng),
            bn1: BatchNorm::new(cout),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, false, rng),
            bn2: BatchNorm::new(cout),
            shortcut: (stride != 1 || cin != cout).then(|| {
                (
                    Conv2d::new(cin, cout, 1, stride, 0, false, rng),
                    BatchNorm::new(cout),
                )
            }),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.bn1.forward(tape, h)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h)?;
        let h = self.bn2.forward(tape, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(tape, x)?;
                bn.forward(tape, s)?
            }
            None => x,
        };
        let sum = tape.add(h, skip)?;
        Ok(tape.relu(sum))
    }
}

impl Module for ResidualBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some((c, b)) = &self.shortcut {
            c.visit(&join(prefix, "shortcut.conv"), f);
            b.visit(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        if let Some((c, b)) = &mut self.shortcut {
            c.visit_mut(&join(prefix, "shortcut.conv"), f);
            b.visit_mut(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        self.bn1.set_mode(mode);
        self.bn2.set_mode(mode);
        if let Some((_, b)) = &mut self.shortcut {
            b.set_mode(mode);
        }
    }
}

/// Residual stages following a [`StagePlan`], then global average pooling.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub plan: StagePlan,
    blocks: Vec<((usize, usize), ResidualBlock)>,
}

impl Backbone {
    pub fn new(plan: &StagePlan, rng: &mut Rng) -> Result<Self> {
        plan.validate()?;
        let blocks = plan
            .blocks()
            .into_iter()
            .map(|(s, i, cin, cout, stride)| ((s, i), ResidualBlock::new(cin, cout, stride, rng)))
            .collect();
        Ok(Self {
            plan: plan.clone(),
            blocks,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.plan.feature_dim()
    }

    /// Pooled features `[N, feature_dim]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (_, b) in &self.blocks {
            h = b.forward(tape, h)?;
        }
        tape.global_avg_pool(h)
    }
}

impl Module for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        for ((s, i), b) in &self.blocks {
            b.visit(&join(prefix, &format!("stage{s}.block{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for ((s, i), b) in &mut self.blocks {
            b.visit_mut(&join(prefix, &format!("stage{s}.block{i}")), f);
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        for (_, b) in &mut self.blocks {
            b.set_mode(mode);
        }
    }
}

/// Three equal-width linear layers, each followed by batch norm; ReLU after
/// the first two only.
#[derive(Debug, Clone)]
pub struct ProjectionMlp {
    layers: [(Linear, BatchNorm); 3],
}

impl ProjectionMlp {
    pub fn new(fin: usize, width: usize, rng: &mut Rng) -> Self {
        Self {
            layers: [
                (Linear::new(fin, width, false, rng), BatchNorm::new(width)),
                (Linear::new(width, width, false, rng), BatchNorm::new(width)),
                (Linear::new(width, width, false, rng), BatchNorm::new(width)),
            ],
        }
    }

    pub fn width(&self) -> usize {
        self.layers[2].0.out_features()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (fc, bn)) in self.layers.iter().enumerate() {
            h = fc.forward(tape, h)?;
            h = bn.forward(tape, h)?;
            if i < 2 {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

impl Module for ProjectionMlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        for (i, (fc, bn)) in self.layers.iter().enumerate() {
            fc.visit(&join(prefix, &format!("fc{i}")), f);
            bn.visit(&join(prefix, &format!("bn{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (i, (fc, bn)) in self.layers.iter_mut().enumerate() {
            fc.visit_mut(&join(prefix, &format!("fc{i}")), f);
            bn.visit_mut(&join(prefix, &format!("bn{i}")), f);
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        for (_, bn) in &mut self.layers {
            bn.set_mode(mode);
        }
    }
}

/// Bottleneck predictor `width → width/4 → width`, BN+ReLU after the first
/// layer only.
#[derive(Debug, Clone)]
pub struct PredictionMlp {
    fc1: Linear,
    bn1: BatchNorm,
    fc2: Linear,
}

impl PredictionMlp {
    pub fn new(width: usize, rng: &mut Rng) -> Self {
        let hidden = (width / 4).max(1);
        Self {
            fc1: Linear::new(width, hidden, false, rng),
            bn1: BatchNorm::new(hidden),
            fc2: Linear::new(hidden, width, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = self.bn1.forward(tape, h)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, h)
    }
}

impl Module for PredictionMlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }

    fn set_mode(&mut self, mode: Mode) {
        self.bn1.set_mode(mode);
    }
}

#[derive(Debug, Clone)]
pub enum Predictor {
    Mlp(PredictionMlp),
    /// `p = z`; used to pin the loss at its aligned extreme.
    Identity,
}

#[derive(Debug, Clone)]
pub struct SimSiamModel {
    pub backbone: Backbone,
    pub projector: ProjectionMlp,
    pub predictor: Predictor,
}

/// Forward results for one pair of views.
#[derive(Debug, Clone, Copy)]
pub struct PairOutputs {
    pub loss: Var,
    pub z1: Var,
    pub z2: Var,
    pub p1: Var,
    pub p2: Var,
}

impl SimSiamModel {
    pub fn new(plan: &StagePlan, proj_width: usize, rng: &mut Rng) -> Result<Self> {
        if proj_width < 4 {
            return Err(Error::InvalidParam("projection width must be >= 4".into()));
        }
        let backbone = Backbone::new(plan, rng)?;
        let projector = ProjectionMlp::new(backbone.feature_dim(), proj_width, rng);
        let predictor = Predictor::Mlp(PredictionMlp::new(proj_width, rng));
        Ok(Self {
            backbone,
            projector,
            predictor,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    /// `(z, p)` for one view.
    pub fn project(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let h = self.backbone.forward(tape, x)?;
        let z = self.projector.forward(tape, h)?;
        let p = match &self.predictor {
            Predictor::Mlp(m) => m.forward(tape, z)?,
            Predictor::Identity => z,
        };
        Ok((z, p))
    }

    /// Symmetric stop-gradient loss on a pair of view batches.
    pub fn pair_loss(&self, tape: &mut Tape, x1: Var, x2: Var) -> Result<PairOutputs> {
        let (z1, p1) = self.project(tape, x1)?;
        let (z2, p2) = self.project(tape, x2)?;
        let loss = symmetric_loss(tape, p1, z1, p2, z2)?;
        Ok(PairOutputs {
            loss,
            z1,
            z2,
            p1,
            p2,
        })
    }

    /// Unit-norm pooled backbone features of one image, using running
    /// batch-norm statistics.
    pub fn embed(&self, img: &GrayImage) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let x = tape.constant(image_batch(&[img])?);
        let f = self.backbone.forward(&mut tape, x)?;
        let e = tape.l2_normalize(f)?;
        Ok(tape.value(e).data().to_vec())
    }
}

impl Module for SimSiamModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.projector.visit(&join(prefix, "projector"), f);
        if let Predictor::Mlp(m) = &self.predictor {
            m.visit(&join(prefix, "predictor"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.projector.visit_mut(&join(prefix, "projector"), f);
        if let Predictor::Mlp(m) = &mut self.predictor {
            m.visit_mut(&join(prefix, "predictor"), f);
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        self.backbone.set_mode(mode);
        self.projector.set_mode(mode);
        if let Predictor::Mlp(m) = &mut self.predictor {
            m.set_mode(mode);
        }
    }
}

/// `D(p, z) = −cos(p, z)`, averaged over rows. The caller decides whether
/// `z` is detached.
pub fn negative_cosine(tape: &mut Tape, p: Var, z: Var) -> Result<Var> {
    let cos = tape.cosine_similarity(p, z)?;
    let m = tape.mean(cos);
    Ok(tape.scale(m, -1.0))
}

/// `½·D(p₁, sg(z₂)) + ½·D(p₂, sg(z₁))`.
pub fn symmetric_loss(tape: &mut Tape, p1: Var, z1: Var, p2: Var, z2: Var) -> Result<Var> {
    let z1 = tape.stop_gradient(z1);
    let z2 = tape.stop_gradient(z2);
    let a = negative_cosine(tape, p1, z2)?;
    let b = negative_cosine(tape, p2, z1)?;
    let a = tape.scale(a, 0.5);
    let b = tape.scale(b, 0.5);
    tape.add(a, b)
}

/// Mean over dimensions of the per-dimension standard deviation of the
/// L2-normalized rows of `z`. Collapse drives it to zero; healthy
/// representations sit near `1/√d`.
pub fn embedding_std(z: &crate::tensor::Tensor) -> Result<f64> {
    let (n, d) = match z.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::shape("rank", format!("expected [N, d], got {s:?}"))),
    };
    let mut rows = Vec::with_capacity(n * d);
    for row in z.data().chunks(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate("zero projection vector".into()));
        }
        rows.extend(row.iter().map(|v| v / norm));
    }
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| rows[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| (rows[i * d + j] - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        total += var.sqrt();
    }
    Ok(total / d as f64)
}

#[derive(Debug, Clone)]
pub struct SimSiamConfig {
    pub plan: StagePlan,
    pub proj_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for SimSiamConfig {
    fn default() -> Self {
        Self {
            plan: StagePlan::default(),
            proj_width: 128,
            epochs: 30,
            batch_size: 32,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

/// One line of the training metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSiamEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub embed_std: f64,
    pub lr: f64,
}

/// Trains a fresh model on `images`. The returned model is in eval mode.
pub fn train_simsiam(
    images: &[GrayImage],
    cfg: &SimSiamConfig,
) -> Result<(SimSiamModel, Vec<SimSiamEpoch>)> {
    let mut model = SimSiamModel::new(
        &cfg.plan,
        cfg.proj_width,
        &mut rng::stream(cfg.seed, "simsiam/init"),
    )?;
    let metrics = train_simsiam_model(&mut model, images, cfg, |_| {})?;
    Ok((model, metrics))
}

/// Continues training `model` in place, calling `on_epoch` after each epoch.
pub fn train_simsiam_model(
    model: &mut SimSiamModel,
    images: &[GrayImage],
    cfg: &SimSiamConfig,
    mut on_epoch: impl FnMut(&SimSiamEpoch),
) -> Result<Vec<SimSiamEpoch>> {
    if images.is_empty() {
        return Err(Error::Data(
            "contrastive training needs at least one image".into(),
        ));
    }
    if cfg.batch_size < 2 {
        return Err(Error::InvalidParam("batch size must be >= 2".into()));
    }
    cfg.augment.validate()?;
    let mut sgd = SgdState::new(cfg.base_lr, cfg.batch_size);
    sgd.momentum = cfg.momentum;
    sgd.weight_decay = cfg.weight_decay;
    let plan: Vec<Vec<Vec<usize>>> = (0..cfg.epochs)
        .map(|e| {
            shuffled_batches(
                images.len(),
                cfg.batch_size,
                cfg.seed,
                &format!("simsiam/shuffle/epoch{e}"),
            )
        })
        .collect();
    let total_steps: usize = plan.iter().map(Vec::len).sum::<usize>().max(1);
    let mut step = 0;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    model.set_mode(Mode::Train);
    for (epoch, batches) in plan.iter().enumerate() {
        let aug = AugmentConfig {
            seed: rng::derive_seed(cfg.seed, &format!("simsiam/augment/epoch{epoch}")),
            ..cfg.augment.clone()
        };
        let epoch_lr = cosine_lr(step, total_steps, &sgd)?;
        let (mut loss_sum, mut std_sum) = (0.0, 0.0);
        for batch in batches {
            let lr = cosine_lr(step, total_steps, &sgd)?;
            let mut v1 = Vec::with_capacity(batch.len());
            let mut v2 = Vec::with_capacity(batch.len());
            for &i in batch {
                let (a, b) = augment_pair(&images[i], &aug, i as u64)?;
                v1.push(a);
                v2.push(b);
            }
            let mut tape = Tape::new();
            let x1 = tape.constant(image_batch(&v1.iter().collect::<Vec<_>>())?);
            let x2 = tape.constant(image_batch(&v2.iter().collect::<Vec<_>>())?);
            let out = model.pair_loss(&mut tape, x1, x2)?;
            let loss = tape.value(out.loss).item();
            if !loss.is_finite() {
                return Err(Error::Degenerate(format!(
                    "non-finite loss at epoch {}",
                    epoch + 1
                )));
            }
            loss_sum += loss;
            std_sum += embedding_std(tape.value(out.z1))?;
            let grads = tape.backward(out.loss)?;
            model.absorb(&grads);
            model.commit_running_stats(&tape);
            sgd_step(model, &mut sgd, lr)?;
            model.zero_grad();
            step += 1;
        }
        let n = batches.len().max(1) as f64;
        let record = SimSiamEpoch {
            epoch: epoch + 1,
            mean_loss: loss_sum / n,
            embed_std: std_sum / n,
            lr: epoch_lr,
        };
        on_epoch(&record);
        metrics.push(record);
    }
    model.set_mode(Mode::Eval);
    Ok(metrics)
}

pub const CHECKPOINT_KIND: &str = "simsiam";

pub fn encoder_checkpoint(model: &SimSiamModel) -> Checkpoint {
    Checkpoint::from_module(model)
        .with_meta("kind", CHECKPOINT_KIND)
        .with_meta("plan", model.backbone.plan.to_string())
        .with_meta("proj_width", model.projector.width().to_string())
        .with_meta(
            "predictor",
            match model.predictor {
                Predictor::Mlp(_) => "mlp",
                Predictor::Identity => "identity",
            },
        )
}

pub fn save_encoder(model: &SimSiamModel, path: impl AsRef<Path>) -> Result<()> {
    encoder_checkpoint(model).save(path)
}

pub fn encoder_from_checkpoint(ckpt: &Checkpoint) -> Result<SimSiamModel> {
    let kind = ckpt.require_meta("kind")?;
    if kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!(
            "expected a `{CHECKPOINT_KIND}` checkpoint, found `{kind}`"
        )));
    }
    let plan: StagePlan = ckpt.require_meta("plan")?.parse()?;
    let width: usize = ckpt
        .require_meta("proj_width")?
        .parse()
        .map_err(|_| Error::Checkpoint("malformed proj_width".into()))?;
    let mut model = SimSiamModel::new(&plan, width, &mut rng::stream(0, "simsiam/skeleton"))?;
    if ckpt.meta("predictor") == Some("identity") {
        model.predictor = Predictor::Identity;
    }
    ckpt.load_into(&mut model)?;
    model.set_mode(Mode::Eval);
    Ok(model)
}

pub fn load_encoder(path: impl AsRef<Path>) -> Result<SimSiamModel> {
    encoder_from_checkpoint(&Checkpoint::load(path)?)
}
