//! SGD with momentum and weight decay, and the cosine learning-rate decay.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::nn::Module;
use crate::error::{Error, Result};

/// Optimizer configuration plus one velocity buffer per parameter name.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Default for SgdState {
    fn default() -> Self {
        Self::new(0.05, 256)
    }
}

impl SgdState {
    /// Momentum 0.9 and weight decay 1e-4.
    pub fn new(base_lr: f64, batch_size: usize) -> Self {
        Self {
            base_lr,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size,
            velocity: BTreeMap::new(),
        }
    }

    /// `base_lr × batch_size / 256`.
    pub fn initial_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v` for
/// every trainable parameter. Fails without touching anything if a trainable
/// parameter has no gradient.
pub fn sgd_step(model: &mut dyn Module, state: &mut SgdState, lr: f64) -> Result<()> {
    let mut missing = None;
    model.visit("", &mut |name, p| {
        if p.trainable && p.grad.is_none() && missing.is_none() {
            missing = Some(name.to_string());
        }
    });
    if let Some(name) = missing {
        return Err(Error::Optimizer(format!(
            "parameter `{name}` has no gradient"
        )));
    }
    let (momentum, wd) = (state.momentum, state.weight_decay);
    let velocity = &mut state.velocity;
    model.visit_mut("", &mut |name, p| {
        if !p.trainable {
            return;
        }
        let grad = p.grad.as_ref().expect("checked above");
        let v = velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; p.value.numel()]);
        for ((vi, &g), w) in v.iter_mut().zip(grad.data()).zip(p.value.data_mut()) {
            *vi = momentum * *vi + g + wd * *w;
            *w -= lr * *vi;
        }
    });
    Ok(())
}

/// `initial_lr × ½(1 + cos(π·t/T))` for step `t` of `T`.
pub fn cosine_lr(t: usize, total: usize, state: &SgdState) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidParam("schedule length must be >= 1".into()));
    }
    if t > total {
        return Err(Error::InvalidParam(format!(
            "step {t} beyond schedule length {total}"
        )));
    }
    let phase = PI * t as f64 / total as f64;
    Ok(state.initial_lr() * 0.5 * (1.0 + phase.cos()))
}
