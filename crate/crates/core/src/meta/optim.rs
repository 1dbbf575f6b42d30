//! Nesterov SGD with L2 weight decay and the poly learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::ParamSet;

/// `α₀·(1 − t/T)^power`, clamped at zero past `T`.
pub fn poly_lr(base: f64, t: u64, total: u64, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (1.0 - t as f64 / total as f64).max(0.0);
    base * frac.powf(power)
}

/// Per-step rule:
/// `d = g + wd·p; buf = μ·buf + d; d = d + μ·buf; p -= lr·d`,
/// with the buffer initialised to `d` on the first step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Nesterov {
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(skip)]
    buffer: Option<Vec<Vec<f64>>>,
}

impl Nesterov {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffer: None,
        }
    }

    /// Plain `p − lr·g`.
    pub fn plain() -> Self {
        Self::new(0.0, 0.0)
    }

    pub fn buffer(&self) -> Option<&[Vec<f64>]> {
        self.buffer.as_deref()
    }

    /// Restores momentum buffers, one per parameter entry in order.
    pub fn set_buffer(&mut self, params: &ParamSet, buffer: Option<Vec<Vec<f64>>>) -> Result<()> {
        if let Some(b) = &buffer {
            let ok = b.len() == params.len() && b.iter().zip(params.iter()).all(|(v, (_, t))| v.len() == t.numel());
            if !ok {
                return Err(Error::Config("momentum buffer does not match parameters".into()));
            }
        }
        self.buffer = buffer;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.buffer = None;
    }

    /// Updates every entry of `params` that appears in `grads`; entries
    /// missing from `grads` are left untouched (their buffers too).
    pub fn step(&mut self, params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
        let first = self.buffer.is_none();
        let buf = self
            .buffer
            .get_or_insert_with(|| params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect());
        if buf.len() != params.len() {
            return Err(Error::Config("momentum buffer does not match parameters".into()));
        }
        let mu = self.momentum;
        let wd = self.weight_decay;
        let mut out = Vec::with_capacity(params.len());
        for ((name, p), b) in params.iter().zip(buf.iter_mut()) {
            if !grads.contains(name) {
                out.push(p.detach());
                continue;
            }
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::Config(format!("gradient for {name} has shape {:?}", g.shape())));
            }
            let mut next = p.to_vec();
            for ((x, &gi), bi) in next.iter_mut().zip(g.data()).zip(b.iter_mut()) {
                let mut d = gi + wd * *x;
                if mu != 0.0 {
                    *bi = if first { d } else { mu * *bi + d };
                    d += mu * *bi;
                }
                *x -= lr * d;
            }
            out.push(crate::tensorcore::Tensor::new(next, p.shape())?);
        }
        let next = params.with_values(out)?;
        if next.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Numerical("parameter update produced non-finite values".into()));
        }
        Ok(next)
    }
}
