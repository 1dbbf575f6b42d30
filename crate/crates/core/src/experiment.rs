//! Experiment plumbing shared by the command line and the acceptance
//! suite: ablation variants, one-shot adaptation and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::meta::{fine_tune, meta_train, Algorithm, FineTuneConfig, FineTuneOutcome, MetaState, TrainConfig, TrainEvent, TrainOutcome};
use crate::metrics::{evaluate, EvalReport};
use crate::phantoms::{Group, MetaPool, PoolSource};
use crate::segnet::SegNet;
use crate::tensorcore::ParamSet;

/// Rows of the regularization ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Joint pre-training, no meta-learning.
    A,
    /// Bi-level training without either regularizer.
    B,
    /// Bi-level plus the inter-tissue term.
    C,
    /// Bi-level plus the intra-tissue term.
    D,
    /// Bi-level plus both terms.
    E,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E];

    pub fn algorithm(self) -> Algorithm {
        match self {
            Variant::A => Algorithm::Joint,
            _ => Algorithm::Dumeta,
        }
    }

    pub fn loss(self, base: &LossWeights) -> LossWeights {
        let (beta, gamma) = match self {
            Variant::A | Variant::B => (0.0, 0.0),
            Variant::C => (base.beta, 0.0),
            Variant::D => (0.0, base.gamma),
            Variant::E => (base.beta, base.gamma),
        };
        LossWeights {
            beta,
            gamma,
            ..base.clone()
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Variant::A => "joint pre-training",
            Variant::B => "meta, no regularizers",
            Variant::C => "meta + inter-tissue",
            Variant::D => "meta + intra-tissue",
            Variant::E => "meta + both regularizers",
        }
    }

    pub fn letter(self) -> char {
        match self {
            Variant::A => 'A',
            Variant::B => 'B',
            Variant::C => 'C',
            Variant::D => 'D',
            Variant::E => 'E',
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            "D" | "d" => Ok(Variant::D),
            "E" | "e" => Ok(Variant::E),
            other => Err(Error::Config(format!("unknown variant {other:?} (A–E)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flips: bool,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flips: true,
            noise_sigma: 0.0,
        }
    }
}

/// Trains one variant on the pool's three training groups.
pub fn train_variant(
    net: &SegNet,
    pool: &MetaPool,
    train: &TrainConfig,
    augment: AugmentConfig,
    variant: Variant,
    seed: u64,
    hook: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        loss: variant.loss(&train.loss),
        ..train.clone()
    };
    let source = PoolSource::training(pool, augment.flips, augment.noise_sigma);
    let state = MetaState::new(net, &cfg, seed)?;
    meta_train(net, &source, &cfg, variant.algorithm(), state, hook)
}

/// Seeded choice of `shots` subject indices from the group's train split.
pub fn choose_shots(group: &Group, shots: usize, seed: u64) -> Result<Vec<usize>> {
    if shots == 0 || shots > group.split.train.len() {
        return Err(Error::Config(format!(
            "cannot draw {shots} shots from {} training subjects",
            group.split.train.len()
        )));
    }
    let mut pool = group.split.train.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut picked = pool[..shots].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Fine-tunes the head on `ft.shots` seeded subjects of `group`.
pub fn adapt(
    net: &SegNet,
    group: &Group,
    theta: &ParamSet,
    phi: &ParamSet,
    ft: &FineTuneConfig,
    weights: &LossWeights,
    seed: u64,
) -> Result<(FineTuneOutcome, Vec<usize>)> {
    let picked = choose_shots(group, ft.shots, seed)?;
    let shots = group.batch(&picked)?;
    Ok((fine_tune(net, theta, phi, &shots, ft, weights, seed)?, picked))
}

/// Evaluation items for a group's held-out split.
pub fn held_out_items(group: &Group) -> Vec<(String, crate::tensorcore::Tensor, crate::labels::LabelMap)> {
    group
        .split
        .val
        .iter()
        .map(|&i| {
            let s = &group.subjects[i];
            (format!("{}/{}", group.spec.name, s.id), s.image.clone(), s.labels.clone())
        })
        .collect()
}

pub fn evaluate_group(net: &SegNet, group: &Group, theta: &ParamSet, omega: &ParamSet, fingerprint: &str) -> Result<EvalReport> {
    evaluate(net, theta, omega, &held_out_items(group), 1.0, fingerprint)
}

/// Mean over the per-seed values and the paired mean difference `a − b`.
pub fn paired_gap(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()).max(1) as f64;
    a.iter().zip(b).map(|(x, y)| x - y).sum::<f64>() / n
}
