//! Parameters, the [`Module`] visitor trait, and the basic layers.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tape::{Gradients, StatUpdate, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// Process-unique identity linking a parameter to its tape leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named tensor owned by a layer. Gradients accumulate in `grad` until
/// cleared with [`Module::zero_grad`].
#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

impl Clone for Parameter {
    /// Clones get a fresh identity so two copies never alias on one tape.
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            trainable: self.trainable,
        }
    }
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        Self {
            id: ParamId::fresh(),
            value,
            grad: None,
            trainable: true,
        }
    }

    /// Non-trainable state such as batch-norm running statistics.
    pub fn buffer(value: Tensor) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate(&mut self, g: &Tensor) {
        match &mut self.grad {
            Some(buf) => buf
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns parameters. Implementors list their parameters with
/// stable dotted names; the provided methods build gradient bookkeeping,
/// mode switching and checkpointing on top.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter));
    fn set_mode(&mut self, mode: Mode);

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _| names.push(n.to_string()));
        names
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.value.numel()
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.grad = None);
    }

    /// Accumulates the gradients of every trainable parameter recorded on
    /// the tape that produced `grads`.
    fn absorb(&mut self, grads: &Gradients) {
        self.visit_mut("", &mut |_, p| {
            if p.trainable {
                if let Some(g) = grads.param(p.id()) {
                    p.accumulate(g);
                }
            }
        });
    }

    /// Applies the running-statistic updates recorded by train-mode batch
    /// norms, in recording order.
    fn commit_running_stats(&mut self, tape: &Tape) {
        let updates = tape.stat_updates();
        if updates.is_empty() {
            return;
        }
        self.visit_mut("", &mut |_, p| {
            let id = p.id();
            for u in updates.iter().filter(|u| u.target == id) {
                for (r, b) in p.value.data_mut().iter_mut().zip(&u.batch_value) {
                    *r = (1.0 - u.momentum) * *r + u.momentum * b;
                }
            }
        });
    }

    /// Copies every parameter value, keyed by name.
    fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n.to_string(), p.value.clone())));
        out
    }
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// 2-D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let weight = Parameter::new(kaiming(
            &[cout, cin, kernel, kernel],
            cin * kernel * kernel,
            rng,
        ));
        Self {
            weight,
            bias: bias.then(|| Parameter::new(Tensor::zeros(&[cout]))),
            stride,
            pad,
        }
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, stride: usize, pad: usize) -> Self {
        Self {
            weight: Parameter::new(weight),
            bias: bias.map(Parameter::new),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn set_mode(&mut self, _: Mode) {}
}

/// Batch normalization over the channel axis of `[N, C, ...]` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Parameter,
    pub running_var: Parameter,
    pub eps: f64,
    /// Rate at which running statistics track batch statistics.
    pub momentum: f64,
    pub mode: Mode,
}

impl BatchNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Parameter::new(Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(Tensor::zeros(&[channels])),
            running_mean: Parameter::buffer(Tensor::zeros(&[channels])),
            running_var: Parameter::buffer(Tensor::full(&[channels], 1.0)),
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
            mode: Mode::Train,
        }
    }

    /// Eval-mode batch norm with the given affine parameters and statistics.
    pub fn from_stats(
        gamma: Vec<f64>,
        beta: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    ) -> Result<Self> {
        let c = gamma.len();
        if beta.len() != c || mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "channels",
                "batch-norm statistics lengths differ",
            ));
        }
        if var.iter().any(|&v| v < 0.0) || eps <= 0.0 {
            return Err(Error::InvalidParam(
                "running variance must be >= 0 and eps > 0".into(),
            ));
        }
        Ok(Self {
            gamma: Parameter::new(Tensor::vector(gamma)),
            beta: Parameter::new(Tensor::vector(beta)),
            running_mean: Parameter::buffer(Tensor::vector(mean)),
            running_var: Parameter::buffer(Tensor::vector(var)),
            eps,
            momentum: Self::DEFAULT_MOMENTUM,
            mode: Mode::Eval,
        })
    }

    /// The identity transform in eval mode: γ=1, β=0, μ=0, σ²=1−eps.
    pub fn identity(channels: usize) -> Self {
        let eps = Self::DEFAULT_EPS;
        Self::from_stats(
            vec![1.0; channels],
            vec![0.0; channels],
            vec![0.0; channels],
            vec![1.0 - eps; channels],
            eps,
        )
        .expect("valid identity statistics")
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    /// Per-channel `γ/√(σ²+eps)`.
    pub fn scale(&self) -> Vec<f64> {
        self.gamma
            .value
            .data()
            .iter()
            .zip(self.running_var.value.data())
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect()
    }

    /// Uses batch statistics in train mode (recording running-stat updates
    /// on the tape) and running statistics in eval mode or on an inference
    /// tape.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        if self.mode == Mode::Eval || tape.is_inference() {
            return tape.batch_norm_eval(
                x,
                gamma,
                beta,
                self.running_mean.value.data(),
                self.running_var.value.data(),
                self.eps,
            );
        }
        let count: usize = {
            let s = tape.value(x).shape();
            s[0] * s[2..].iter().product::<usize>()
        };
        let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
        // Running variance tracks the unbiased estimate.
        let correction = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        tape.push_stat_update(StatUpdate {
            target: self.running_mean.id(),
            batch_value: mean,
            momentum: self.momentum,
        });
        tape.push_stat_update(StatUpdate {
            target: self.running_var.id(),
            batch_value: var.iter().map(|v| v * correction).collect(),
            momentum: self.momentum,
        });
        Ok(y)
    }
}

impl Module for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }
}

/// Fully connected layer `y = x·Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Linear {
    /// Kaiming-normal weights; bias uniform in `±1/√fin`.
    pub fn new(fin: usize, fout: usize, bias: bool, rng: &mut Rng) -> Self {
        let weight = Parameter::new(kaiming(&[fout, fin], fin, rng));
        let bound = 1.0 / (fin as f64).sqrt();
        let bias = bias.then(|| {
            let b = (0..fout).map(|_| rng.random_range(-bound..bound)).collect();
            Parameter::new(Tensor::vector(b))
        });
        Self { weight, bias }
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn set_mode(&mut self, _: Mode) {}
}
