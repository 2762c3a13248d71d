use std::collections::{BTreeMap, HashMap};

use super::kernels::{conv_backward, conv_forward, conv_out_dim, ConvGeom};
use super::nn::{ParamId, Parameter};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A running-statistic update produced by a train-mode batch norm, applied
/// to the target parameter by [`super::Module::commit_running_stats`].
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub target: ParamId,
    pub batch_value: Vec<f64>,
    pub momentum: f64,
}

/// One recorded operation, as reported by [`Tape::trace`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpTrace {
    pub name: &'static str,
    /// Kernel extent for convolutions.
    pub kernel: Option<(usize, usize)>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    StopGradient,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
        norms_a: Vec<f64>,
        norms_b: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn trace(&self) -> OpTrace {
        let (name, kernel) = match self {
            Op::Leaf => ("leaf", None),
            Op::Param(_) => ("param", None),
            Op::StopGradient => ("stop_gradient", None),
            Op::Conv2d { geom, .. } => ("conv2d", Some((geom.kh, geom.kw))),
            Op::BatchNormTrain { .. } => ("batch_norm_train", None),
            Op::BatchNormEval { .. } => ("batch_norm_eval", None),
            Op::Relu(_) => ("relu", None),
            Op::Add(..) => ("add", None),
            Op::Mul(..) => ("mul", None),
            Op::Scale(..) => ("scale", None),
            Op::Sum(_) => ("sum", None),
            Op::Mean(_) => ("mean", None),
            Op::GlobalAvgPool(_) => ("global_avg_pool", None),
            Op::Linear { .. } => ("linear", None),
            Op::L2Normalize { .. } => ("l2_normalize", None),
            Op::Cosine { .. } => ("cosine_similarity", None),
            Op::CrossEntropy { .. } => ("cross_entropy", None),
        };
        OpTrace { name, kernel }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations. Parents always precede children,
/// so reverse insertion order is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    inference: bool,
    stat_updates: Vec<StatUpdate>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter leaf. Every parameter recorded on the tape
    /// has one, zero when no path reaches the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    match shape {
        [d] => (1, *d),
        [n, d] => (*n, *d),
        _ => (0, 0),
    }
}

/// `(n, c, s)` view of a `[N, C, ...]` tensor.
fn channel_view(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    Some((shape[0], shape[1], shape[2..].iter().product()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which every batch norm uses running statistics regardless
    /// of its mode.
    pub fn inference() -> Self {
        Self {
            inference: true,
            ..Self::default()
        }
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn trace(&self) -> Vec<OpTrace> {
        self.nodes.iter().map(|n| n.op.trace()).collect()
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    pub fn push_stat_update(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a value that receives gradients but is not a parameter.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records a parameter's current value. A parameter appears on a tape at
    /// most once; repeated calls return the same handle.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.push(p.value.clone(), Op::Param(p.id()));
        self.params.insert(p.id(), v);
        v
    }

    /// Identity in the forward pass; passes no gradient to its input.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient)
    }

    /// 2-D cross-correlation of `x: [N, Cin, H, W]` with `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 {
            return Err(Error::shape(
                "input.rank",
                format!("conv2d input must be 4-D, got {xs:?}"),
            ));
        }
        if ws.len() != 4 {
            return Err(Error::shape(
                "weight.rank",
                format!("conv2d weight must be 4-D, got {ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "in_channels",
                format!("input has {} channels, weight expects {}", xs[1], ws[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("stride", "stride must be >= 1"));
        }
        let ho = conv_out_dim(xs[2], ws[2], stride, pad).ok_or_else(|| {
            Error::shape(
                "height",
                format!("kernel {} exceeds padded height {}", ws[2], xs[2] + 2 * pad),
            )
        })?;
        let wo = conv_out_dim(xs[3], ws[3], stride, pad).ok_or_else(|| {
            Error::shape(
                "width",
                format!("kernel {} exceeds padded width {}", ws[3], xs[3] + 2 * pad),
            )
        })?;
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(
                    "out_channels",
                    format!(
                        "bias shape {:?} does not match {} output channels",
                        self.shape(b),
                        ws[0]
                    ),
                ));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho,
            wo,
        };
        let out = conv_forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let value = Tensor::new(&[geom.n, geom.cout, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, s) = channel_view(self.shape(x)).ok_or_else(|| {
            Error::shape(
                "rank",
                format!("batch norm needs [N, C, ...], got {:?}", self.shape(x)),
            )
        })?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "channels",
                format!(
                    "input has {c} channels, affine parameters {:?}/{:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok((n, c, s))
    }

    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let (n, c, s) = channel_view(self.shape(x)).expect("checked");
        let (xv, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * s;
                for j in off..off + s {
                    xhat[j] = (xv[j] - mean[ch]) * inv_std[ch];
                    y[j] = g[ch] * xhat[j] + b[ch];
                }
            }
        }
        (xhat, y)
    }

    /// Batch norm over every axis except 1, using batch statistics. Returns
    /// the output plus the per-channel batch mean and biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, s) = self.check_bn(x, gamma, beta)?;
        let m = (n * s) as f64;
        let xv = self.data(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                mean[ch] += xv[(i * c + ch) * s..][..s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for i in 0..n {
            for ch in 0..c {
                var[ch] += xv[(i * c + ch) * s..][..s]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, y) = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        let value = Tensor::new(self.shape(x), y)?;
        let out = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((out, mean, var))
    }

    /// Batch norm with fixed statistics: `gamma·(x − mean)/√(var + eps) + beta`.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.check_bn(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "channels",
                format!("running statistics must have {c} entries"),
            ));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, y) = self.bn_apply(x, gamma, beta, mean, &inv_std);
        let value = Tensor::new(self.shape(x), y)?;
        Ok(self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&v| v.max(0.0)).collect())
            .expect("same shape");
        self.push(value, Op::Relu(x))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "elementwise",
                format!(
                    "operand shapes differ: {:?} vs {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape(), t.data().iter().map(|v| v * factor).collect())
            .expect("same shape");
        self.push(value, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Adaptive average pooling to 1×1: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(
                "rank",
                format!("pooling needs [N, C, H, W], got {shape:?}"),
            ));
        }
        let hw = shape[2] * shape[3];
        let data = self
            .data(x)
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&shape[..2], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    /// Fully connected layer: `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape(
                "rank",
                format!("linear needs 2-D input and weight, got {xs:?}, {ws:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "in_features",
                format!("input width {} vs weight width {}", xs[1], ws[1]),
            ));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape(
                    "out_features",
                    format!("bias shape {:?} vs {fout} outputs", self.shape(b)),
                ));
            }
        }
        let mut out = vec![0.0; n * fout];
        if let Some(b) = b {
            let bv = self.data(b);
            out.chunks_mut(fout).for_each(|row| row.copy_from_slice(bv));
        }
        super::kernels::gemm(
            n,
            fin,
            fout,
            self.data(x),
            false,
            self.data(w),
            true,
            1.0,
            &mut out,
        );
        let value = Tensor::new(&[n, fout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Scales each row (last axis of a 1-D or 2-D tensor) to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, d) = rows_of(&shape);
        if n == 0 {
            return Err(Error::shape(
                "rank",
                format!("l2_normalize needs 1-D or 2-D input, got {shape:?}"),
            ));
        }
        let xv = self.data(x);
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for row in xv.chunks(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate("cannot normalize a zero vector".into()));
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::L2Normalize { x, norms }))
    }

    /// Row-wise cosine similarity `a·b / (|a||b|)`; `[d] -> []`, `[N, d] -> [N]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let shape = self.shape(a).to_vec();
        let (n, d) = rows_of(&shape);
        if n == 0 {
            return Err(Error::shape(
                "rank",
                format!("cosine needs 1-D or 2-D input, got {shape:?}"),
            ));
        }
        let (av, bv) = (self.data(a), self.data(b));
        let mut cos = Vec::with_capacity(n);
        let mut norms_a = Vec::with_capacity(n);
        let mut norms_b = Vec::with_capacity(n);
        for (ra, rb) in av.chunks(d).zip(bv.chunks(d)) {
            let aa: f64 = ra.iter().map(|v| v * v).sum();
            let bb: f64 = rb.iter().map(|v| v * v).sum();
            if aa == 0.0 || bb == 0.0 {
                return Err(Error::Degenerate(
                    "cosine similarity of a zero vector is undefined".into(),
                ));
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            // sqrt(aa·bb) rather than sqrt(aa)·sqrt(bb): equal rows give exactly 1.
            cos.push((dot / (aa * bb).sqrt()).clamp(-1.0, 1.0));
            norms_a.push(aa.sqrt());
            norms_b.push(bb.sqrt());
        }
        let out_shape: &[usize] = if shape.len() == 1 { &[] } else { &shape[..1] };
        let value = Tensor::new(out_shape, cos)?;
        Ok(self.push(
            value,
            Op::Cosine {
                a,
                b,
                norms_a,
                norms_b,
            },
        ))
    }

    /// Mean softmax cross-entropy of `logits: [N, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(
                "batch",
                format!("logits {shape:?} vs {} labels", labels.len()),
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidParam(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let lv = self.data(logits);
        let mut probs = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for (row, &label) in lv.chunks(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln();
            total += -(row[label] - max - log_z);
            probs.extend(row.iter().map(|v| (v - max).exp() / z));
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::shape(
                "loss",
                format!("backward needs a scalar loss, got shape {:?}", lt.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) | Op::StopGradient => {}
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = conv_backward(geom, self.data(*x), self.data(*w), &gy);
                    acc(&mut grads, *x, &dx);
                    acc(&mut grads, *w, &dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, &db);
                    }
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, c, s) = channel_view(self.shape(*x)).expect("checked");
                    let g = self.data(*gamma);
                    let m = (n * s) as f64;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * s;
                            for j in off..off + s {
                                dgamma[ch] += gy[j] * xhat[j];
                                dbeta[ch] += gy[j];
                            }
                        }
                    }
                    // dx = g·inv_std/m · (m·dy − Σdy − xhat·Σ(dy·xhat))
                    let mut dx = vec![0.0; gy.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * s;
                            let k = g[ch] * inv_std[ch] / m;
                            for j in off..off + s {
                                dx[j] = k * (m * gy[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
                            }
                        }
                    }
                    acc(&mut grads, *x, &dx);
                    acc(&mut grads, *gamma, &dgamma);
                    acc(&mut grads, *beta, &dbeta);
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, c, s) = channel_view(self.shape(*x)).expect("checked");
                    let g = self.data(*gamma);
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = vec![0.0; gy.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * s;
                            for j in off..off + s {
                                dgamma[ch] += gy[j] * xhat[j];
                                dbeta[ch] += gy[j];
                                dx[j] = gy[j] * g[ch] * inv_std[ch];
                            }
                        }
                    }
                    acc(&mut grads, *x, &dx);
                    acc(&mut grads, *gamma, &dgamma);
                    acc(&mut grads, *beta, &dbeta);
                }
                Op::Relu(x) => {
                    let dx: Vec<f64> = self
                        .data(*x)
                        .iter()
                        .zip(&gy)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    acc(&mut grads, *x, &dx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &gy);
                    acc(&mut grads, *b, &gy);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = gy.iter().zip(self.data(*b)).map(|(g, v)| g * v).collect();
                    let db: Vec<f64> = gy.iter().zip(self.data(*a)).map(|(g, v)| g * v).collect();
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
                Op::Scale(x, f) => {
                    let dx: Vec<f64> = gy.iter().map(|g| g * f).collect();
                    acc(&mut grads, *x, &dx);
                }
                Op::Sum(x) => {
                    let dx = vec![gy[0]; self.value(*x).numel()];
                    acc(&mut grads, *x, &dx);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).numel();
                    let dx = vec![gy[0] / n as f64; n];
                    acc(&mut grads, *x, &dx);
                }
                Op::GlobalAvgPool(x) => {
                    let s = self.shape(*x);
                    let hw = s[2] * s[3];
                    let dx: Vec<f64> = gy
                        .iter()
                        .flat_map(|&g| std::iter::repeat_n(g / hw as f64, hw))
                        .collect();
                    acc(&mut grads, *x, &dx);
                }
                Op::Linear { x, w, b } => {
                    let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let fout = self.shape(*w)[0];
                    let mut dx = vec![0.0; n * fin];
                    super::kernels::gemm(
                        n,
                        fout,
                        fin,
                        &gy,
                        false,
                        self.data(*w),
                        false,
                        0.0,
                        &mut dx,
                    );
                    let mut dw = vec![0.0; fout * fin];
                    super::kernels::gemm(
                        fout,
                        n,
                        fin,
                        &gy,
                        true,
                        self.data(*x),
                        false,
                        0.0,
                        &mut dw,
                    );
                    acc(&mut grads, *x, &dx);
                    acc(&mut grads, *w, &dw);
                    if let Some(b) = b {
                        let mut db = vec![0.0; fout];
                        for row in gy.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                        acc(&mut grads, *b, &db);
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let y = node.value.data();
                    let d = y.len() / norms.len();
                    let mut dx = Vec::with_capacity(y.len());
                    for ((yr, gr), norm) in y.chunks(d).zip(gy.chunks(d)).zip(norms) {
                        let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        dx.extend(yr.iter().zip(gr).map(|(yv, g)| (g - yv * proj) / norm));
                    }
                    acc(&mut grads, *x, &dx);
                }
                Op::Cosine {
                    a,
                    b,
                    norms_a,
                    norms_b,
                } => {
                    let (av, bv) = (self.data(*a), self.data(*b));
                    let cos = node.value.data();
                    let d = av.len() / cos.len();
                    let mut da = Vec::with_capacity(av.len());
                    let mut db = Vec::with_capacity(av.len());
                    for r in 0..cos.len() {
                        let (ra, rb) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                        let (na, nb) = (norms_a[r], norms_b[r]);
                        let g = gy[r];
                        for (x, y) in ra.iter().zip(rb) {
                            da.push(g * (y / (na * nb) - cos[r] * x / (na * na)));
                            db.push(g * (x / (na * nb) - cos[r] * y / (nb * nb)));
                        }
                    }
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let scale = gy[0] / n as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        dl[i * c + l] -= scale;
                    }
                    acc(&mut grads, *logits, &dl);
                }
            }
            grads[i] = Some(gy);
        }

        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = match &grads[i] {
                    Some(g) => Tensor::new(node.value.shape(), g.clone())?,
                    None => Tensor::zeros(node.value.shape()),
                };
                params.insert(id, g);
            }
        }
        let nodes = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|g| Tensor::new(n.value.shape(), g).expect("gradient matches value shape"))
            })
            .collect();
        Ok(Gradients { nodes, params })
    }
}
