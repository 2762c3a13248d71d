//! RepVGG blocks and structural re-parameterization.
//!
//! A training-form block sums three batch-normalized branches (3×3 conv,
//! 1×1 conv, and a bare batch norm on the input when shapes allow) and
//! applies ReLU. Once every batch norm is frozen, each branch is an affine
//! map that can be written as a 3×3 convolution with bias, and the three
//! convolutions add into one. The inference form runs exactly one
//! convolution and one ReLU per block.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::nn::join;
use crate::tensor::{BatchNorm, Conv2d, Linear, Mode, Module, Parameter, Tape, Tensor, Var};

/// A bias-free convolution followed by batch norm.
#[derive(Debug, Clone)]
pub struct ConvBnBranch {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnBranch {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, kernel, stride, kernel / 2, false, rng),
            bn: BatchNorm::new(cout),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        self.bn.forward(tape, y)
    }
}

impl Module for ConvBnBranch {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }

    fn set_mode(&mut self, mode: Mode) {
        self.bn.set_mode(mode);
    }
}

/// Training-form block: `ReLU(BN(conv3x3 x) + BN(conv1x1 x) + BN(x))`.
#[derive(Debug, Clone)]
pub struct RepVggBlock {
    pub dense: ConvBnBranch,
    pub pointwise: ConvBnBranch,
    /// Present only when `stride == 1` and `in_ch == out_ch`.
    pub identity: Option<BatchNorm>,
    pub stride: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl RepVggBlock {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut Rng) -> Self {
        Self {
            dense: ConvBnBranch::new(in_ch, out_ch, 3, stride, rng),
            pointwise: ConvBnBranch::new(in_ch, out_ch, 1, stride, rng),
            identity: (stride == 1 && in_ch == out_ch).then(|| BatchNorm::new(out_ch)),
            stride,
            in_ch,
            out_ch,
        }
    }

    /// Sum of the branch outputs before the activation.
    pub fn branch_sum(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = tape.value(x).shape().get(1).copied().unwrap_or(0);
        if c != self.in_ch {
            return Err(Error::shape(
                "in_channels",
                format!("block expects {} channels, got {c}", self.in_ch),
            ));
        }
        let a = self.dense.forward(tape, x)?;
        let b = self.pointwise.forward(tape, x)?;
        let mut sum = tape.add(a, b)?;
        if let Some(bn) = &self.identity {
            let id = bn.forward(tape, x)?;
            sum = tape.add(sum, id)?;
        }
        Ok(sum)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = self.branch_sum(tape, x)?;
        Ok(tape.relu(s))
    }

    pub fn reparameterize(&self) -> Result<FusedConv> {
        reparameterize(self)
    }
}

impl Module for RepVggBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        self.dense.visit(&join(prefix, "dense"), f);
        self.pointwise.visit(&join(prefix, "pointwise"), f);
        if let Some(bn) = &self.identity {
            bn.visit(&join(prefix, "identity"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.dense.visit_mut(&join(prefix, "dense"), f);
        self.pointwise.visit_mut(&join(prefix, "pointwise"), f);
        if let Some(bn) = &mut self.identity {
            bn.visit_mut(&join(prefix, "identity"), f);
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        self.dense.set_mode(mode);
        self.pointwise.set_mode(mode);
        if let Some(bn) = &mut self.identity {
            bn.set_mode(mode);
        }
    }
}

/// Inference-form block: one 3×3 convolution (pad 1) with bias, then ReLU.
#[derive(Debug, Clone)]
pub struct FusedConv {
    pub conv: Conv2d,
}

impl FusedConv {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize) -> Self {
        Self {
            conv: Conv2d::from_parts(kernel, Some(bias), stride, 1),
        }
    }

    pub fn kernel(&self) -> &Tensor {
        &self.conv.weight.value
    }

    pub fn bias(&self) -> &Tensor {
        &self
            .conv
            .bias
            .as_ref()
            .expect("fused conv has a bias")
            .value
    }

    pub fn stride(&self) -> usize {
        self.conv.stride
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        Ok(tape.relu(y))
    }
}

impl Module for FusedConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        self.conv.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.conv.visit_mut(prefix, f);
    }

    fn set_mode(&mut self, _: Mode) {}
}

fn require_eval(bn: &BatchNorm, what: &str) -> Result<()> {
    if bn.mode != Mode::Eval {
        return Err(Error::Fusion(format!(
            "{what} batch norm is in train mode; switch to eval first"
        )));
    }
    Ok(())
}

/// Folds an eval-mode batch norm into `kernel`: with `s = γ/√(σ²+eps)`,
/// `kernel'_c = s_c·kernel_c` and `bias'_c = β_c − s_c·μ_c`.
fn fold_bn(kernel: &Tensor, bn: &BatchNorm) -> Result<(Tensor, Tensor)> {
    let cout = kernel.shape()[0];
    if bn.channels() != cout {
        return Err(Error::shape(
            "out_channels",
            format!("kernel has {cout} outputs, batch norm {}", bn.channels()),
        ));
    }
    let scale = bn.scale();
    let per_out = kernel.numel() / cout;
    let mut k = kernel.clone();
    for (c, chunk) in k.data_mut().chunks_mut(per_out).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= scale[c]);
    }
    let bias = bn
        .beta
        .value
        .data()
        .iter()
        .zip(bn.running_mean.value.data())
        .zip(&scale)
        .map(|((b, m), s)| b - s * m)
        .collect();
    Ok((k, Tensor::vector(bias)))
}

pub fn fuse_conv_bn(branch: &ConvBnBranch) -> Result<(Tensor, Tensor)> {
    require_eval(&branch.bn, "branch")?;
    if branch.conv.bias.is_some() {
        return Err(Error::Fusion(
            "branch convolutions must be bias-free".into(),
        ));
    }
    fold_bn(&branch.conv.weight.value, &branch.bn)
}

/// Embeds a `[Cout, Cin, 1, 1]` kernel at the center of a zero 3×3 kernel.
pub fn pad_1x1_to_3x3(kernel: &Tensor) -> Result<Tensor> {
    let s = kernel.shape();
    if s.len() != 4 || s[2] != 1 || s[3] != 1 {
        return Err(Error::shape(
            "kernel",
            format!("expected [Cout, Cin, 1, 1], got {s:?}"),
        ));
    }
    let mut out = Tensor::zeros(&[s[0], s[1], 3, 3]);
    for (i, &v) in kernel.data().iter().enumerate() {
        out.data_mut()[i * 9 + 4] = v;
    }
    Ok(out)
}

/// The identity branch as a 3×3 convolution: 1 at the center of each
/// channel's own plane, folded with `bn`.
pub fn identity_to_fused(bn: &BatchNorm, channels: usize) -> Result<(Tensor, Tensor)> {
    require_eval(bn, "identity")?;
    let mut k = Tensor::zeros(&[channels, channels, 3, 3]);
    for c in 0..channels {
        k.data_mut()[(c * channels + c) * 9 + 4] = 1.0;
    }
    fold_bn(&k, bn)
}

/// Collapses a block into one 3×3 convolution with bias.
pub fn reparameterize(block: &RepVggBlock) -> Result<FusedConv> {
    let (mut kernel, mut bias) = fuse_conv_bn(&block.dense)?;
    let (k1, b1) = fuse_conv_bn(&block.pointwise)?;
    let k1 = pad_1x1_to_3x3(&k1)?;
    let mut parts = vec![(k1, b1)];
    if let Some(bn) = &block.identity {
        parts.push(identity_to_fused(bn, block.out_ch)?);
    }
    for (k, b) in parts {
        kernel
            .data_mut()
            .iter_mut()
            .zip(k.data())
            .for_each(|(a, v)| *a += v);
        bias.data_mut()
            .iter_mut()
            .zip(b.data())
            .for_each(|(a, v)| *a += v);
    }
    Ok(FusedConv::new(kernel, bias, block.stride))
}

/// Stage widths and depths. Every stage opens with a stride-2 block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
}

impl Default for StagePlan {
    /// Desk-scale plan for 1×32×32 inputs: 32→16→8→4→2 spatially.
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: vec![16, 32, 64, 128],
            depths: vec![1, 2, 2, 1],
        }
    }
}

impl StagePlan {
    pub fn new(in_channels: usize, widths: Vec<usize>, depths: Vec<usize>) -> Result<Self> {
        let plan = Self {
            in_channels,
            widths,
            depths,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.depths.len() {
            return Err(Error::InvalidParam(
                "stage plan needs matching, non-empty widths and depths".into(),
            ));
        }
        if self.in_channels == 0 || self.widths.contains(&0) || self.depths.contains(&0) {
            return Err(Error::InvalidParam(
                "stage widths, depths and input channels must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated plan")
    }

    /// `(stage, index, in, out, stride)` for every block in order.
    pub fn blocks(&self) -> Vec<(usize, usize, usize, usize, usize)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (s, (&w, &d)) in self.widths.iter().zip(&self.depths).enumerate() {
            for i in 0..d {
                out.push((s, i, cin, w, if i == 0 { 2 } else { 1 }));
                cin = w;
            }
        }
        out
    }
}

/// `in_channels/width:depth,width:depth,...`, e.g. `1/16:1,32:2,64:2,128:1`.
impl fmt::Display for StagePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stages: Vec<String> = self
            .widths
            .iter()
            .zip(&self.depths)
            .map(|(w, d)| format!("{w}:{d}"))
            .collect();
        write!(f, "{}/{}", self.in_channels, stages.join(","))
    }
}

impl FromStr for StagePlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParam(format!("malformed stage plan `{s}`"));
        let (cin, rest) = s.split_once('/').ok_or_else(bad)?;
        let mut widths = Vec::new();
        let mut depths = Vec::new();
        for part in rest.split(',') {
            let (w, d) = part.trim().split_once(':').ok_or_else(bad)?;
            widths.push(w.trim().parse().map_err(|_| bad())?);
            depths.push(d.trim().parse().map_err(|_| bad())?);
        }
        StagePlan::new(cin.trim().parse().map_err(|_| bad())?, widths, depths)
    }
}

#[derive(Debug, Clone)]
pub enum NetBlock {
    Train(RepVggBlock),
    Fused(FusedConv),
}

/// Stages of RepVGG blocks, global average pooling and a linear head.
#[derive(Debug, Clone)]
pub struct RepVggNet {
    pub plan: StagePlan,
    blocks: Vec<((usize, usize), NetBlock)>,
    pub head: Linear,
}

impl RepVggNet {
    pub fn blocks(&self) -> impl Iterator<Item = &NetBlock> {
        self.blocks.iter().map(|(_, b)| b)
    }

    pub fn is_fused(&self) -> bool {
        self.blocks
            .iter()
            .all(|(_, b)| matches!(b, NetBlock::Fused(_)))
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_features()
    }

    pub fn feature_dim(&self) -> usize {
        self.plan.feature_dim()
    }

    /// Backbone output before pooling.
    pub fn feature_map(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (_, b) in &self.blocks {
            h = match b {
                NetBlock::Train(b) => b.forward(tape, h)?,
                NetBlock::Fused(b) => b.forward(tape, h)?,
            };
        }
        Ok(h)
    }

    /// Pooled penultimate features `[N, feature_dim]`.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.feature_map(tape, x)?;
        tape.global_avg_pool(h)
    }

    /// Class logits `[N, classes]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let f = self.features(tape, x)?;
        self.head.forward(tape, f)
    }

    /// The inference form: every training block collapsed to a single
    /// convolution. Requires eval-mode batch norms.
    pub fn reparameterize(&self) -> Result<RepVggNet> {
        let blocks = self
            .blocks
            .iter()
            .map(|(pos, b)| {
                Ok((
                    *pos,
                    match b {
                        NetBlock::Train(b) => NetBlock::Fused(b.reparameterize()?),
                        NetBlock::Fused(f) => NetBlock::Fused(f.clone()),
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(RepVggNet {
            plan: self.plan.clone(),
            blocks,
            head: self.head.clone(),
        })
    }

    /// A fused-form skeleton with zero weights, for loading checkpoints.
    pub fn fused_skeleton(plan: &StagePlan, classes: usize) -> Result<Self> {
        plan.validate()?;
        let mut rng = crate::rng::stream(0, "repvgg/skeleton");
        let blocks = plan
            .blocks()
            .into_iter()
            .map(|(s, i, cin, cout, stride)| {
                (
                    (s, i),
                    NetBlock::Fused(FusedConv::new(
                        Tensor::zeros(&[cout, cin, 3, 3]),
                        Tensor::zeros(&[cout]),
                        stride,
                    )),
                )
            })
            .collect();
        Ok(Self {
            plan: plan.clone(),
            blocks,
            head: Linear::new(plan.feature_dim(), classes, true, &mut rng),
        })
    }
}

/// Assembles a training-form network from `plan` with a `classes`-way head.
pub fn build_net(plan: &StagePlan, classes: usize, rng: &mut Rng) -> Result<RepVggNet> {
    plan.validate()?;
    if classes == 0 {
        return Err(Error::InvalidParam(
            "classifier needs at least one class".into(),
        ));
    }
    let blocks = plan
        .blocks()
        .into_iter()
        .map(|(s, i, cin, cout, stride)| {
            (
                (s, i),
                NetBlock::Train(RepVggBlock::new(cin, cout, stride, rng)),
            )
        })
        .collect();
    Ok(RepVggNet {
        plan: plan.clone(),
        blocks,
        head: Linear::new(plan.feature_dim(), classes, true, rng),
    })
}

impl Module for RepVggNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        for ((s, i), b) in &self.blocks {
            let p = join(prefix, &format!("stage{s}.block{i}"));
            match b {
                NetBlock::Train(b) => b.visit(&p, f),
                NetBlock::Fused(b) => b.visit(&join(&p, "fused"), f),
            }
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for ((s, i), b) in &mut self.blocks {
            let p = join(prefix, &format!("stage{s}.block{i}"));
            match b {
                NetBlock::Train(b) => b.visit_mut(&p, f),
                NetBlock::Fused(b) => b.visit_mut(&join(&p, "fused"), f),
            }
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }

    fn set_mode(&mut self, mode: Mode) {
        for (_, b) in &mut self.blocks {
            if let NetBlock::Train(b) = b {
                b.set_mode(mode);
            }
        }
    }
}
