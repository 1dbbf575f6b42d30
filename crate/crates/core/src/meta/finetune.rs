//! Few-shot adaptation of the segmentation head with a frozen extractor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::Batch;
use crate::losses::{seg_loss, LossWeights};
use crate::segnet::SegNet;
use crate::tensorcore::{grad, GradOptions, ParamRole, ParamSet, Tape};

use super::optim::{poly_lr, Nesterov};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub shots: usize,
    /// Decoder blocks adapted in addition to the classifiers.
    pub n_upsample_layers: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Augmented copies of the shots per step.
    pub batch_size: usize,
    pub flips: bool,
    pub noise_sigma: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            shots: 1,
            n_upsample_layers: 1,
            steps: 40,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 3e-5,
            batch_size: 2,
            flips: true,
            noise_sigma: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub omega: ParamSet,
    pub losses: Vec<f64>,
}

/// Starts from `phi`, trains only the trainable part of the head partition
/// on augmented copies of `shots`, and never touches `theta`.
pub fn fine_tune(
    net: &SegNet,
    theta: &ParamSet,
    phi: &ParamSet,
    shots: &Batch,
    cfg: &FineTuneConfig,
    weights: &LossWeights,
    seed: u64,
) -> Result<FineTuneOutcome> {
    if shots.is_empty() {
        return Err(Error::Config("fine-tuning needs at least one labeled shot".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::Config("fine-tune batch_size must be ≥ 1 and lr ≥ 0".into()));
    }
    let partition = net.partition_head(phi, cfg.n_upsample_layers)?;
    let theta = theta.detach();
    let mut omega = phi.detach().with_role(ParamRole::Head);
    let mut opt = Nesterov::new(cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    let copies: Vec<&Batch> = (0..cfg.batch_size.div_ceil(shots.len())).map(|_| shots).collect();
    let pool = Batch::concat(&copies)?;
    for step in 0..cfg.steps {
        let batch = pool.augment(&mut rng, cfg.flips, cfg.noise_sigma)?;
        let tape = Tape::new();
        let live = omega.map(|name, t| {
            if partition.trainable.contains(name) {
                t.leaf(&tape)
            } else {
                t.clone()
            }
        });
        let (_, logits) = net.forward(&theta, &live, &batch.images)?;
        let loss = seg_loss(&logits, &batch.labels, weights)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(Error::Numerical(format!("fine-tune loss is {v} at step {step}")));
        }
        losses.push(v);
        let names: Vec<&str> = partition.trainable.iter().map(String::as_str).collect();
        let wrt: Vec<_> = names.iter().map(|n| live.get(n)).collect::<std::result::Result<_, _>>()?;
        let g = grad(&loss, &wrt, GradOptions::first_order())?;
        let mut gset = ParamSet::new(ParamRole::Aux);
        for (n, t) in names.iter().zip(g.grads) {
            gset.insert(*n, t.detach())?;
        }
        let lr = poly_lr(cfg.lr, step as u64, cfg.steps as u64, 0.9);
        omega = opt.step(&omega, &gset, lr)?;
    }
    Ok(FineTuneOutcome { omega, losses })
}
