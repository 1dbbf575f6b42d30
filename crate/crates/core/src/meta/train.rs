//! Episodes, meta-training with validation-based selection, and the joint
//! pre-training baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::Batch;
use crate::losses::{outer_loss, seg_loss, tissue_representations, LossWeights, OuterView, TissueReps};
use crate::segnet::SegNet;
use crate::tensorcore::{GradOptions, ParamSet, Tape, Tensor};

use super::bilevel::{check_hypergradient, hypergradient, inner_step, mfl_outer_step, mil_outer_step, params_tape, HypergradMode};
use super::optim::{poly_lr, Nesterov};

/// Where episodes draw their mini-batches from.
pub trait BatchSource {
    fn num_datasets(&self) -> usize;
    /// `n` random training items of `dataset`, augmented as configured.
    fn sample(&self, dataset: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Batch>;
    /// The whole validation split of `dataset`, if it has one.
    fn validation(&self, dataset: usize) -> Result<Option<Batch>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Initial learning rate α₀.
    pub lr: f64,
    /// Inner-loop learning rate; follows the outer schedule when unset.
    pub inner_lr: Option<f64>,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Number of episodes T.
    pub episodes: u64,
    pub batch_size: usize,
    pub hypergrad_mode: HypergradMode,
    pub inner_steps: usize,
    pub shared_outer_batches: bool,
    /// Validate and checkpoint every this many episodes (0: only at the end).
    pub checkpoint_every: u64,
    pub fd_param_limit: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            inner_lr: None,
            lr_power: 0.9,
            momentum: 0.99,
            weight_decay: 3e-5,
            episodes: 200,
            batch_size: 2,
            hypergrad_mode: HypergradMode::Exact,
            inner_steps: 1,
            shared_outer_batches: false,
            checkpoint_every: 25,
            fd_param_limit: 2000,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.inner_lr.is_some_and(|a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::Config("inner_lr must be non-negative".into()));
        }
        if self.episodes < 1 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        if self.batch_size < 1 || self.inner_steps < 1 {
            return Err(Error::Config("batch_size and inner_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay non-negative".into()));
        }
        self.loss.validate()
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        poly_lr(self.lr, t, self.episodes, self.lr_power)
    }

    pub fn inner_lr_at(&self, t: u64) -> f64 {
        self.inner_lr.unwrap_or_else(|| self.lr_at(t))
    }
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub t: u64,
    pub val_loss: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct MetaState {
    pub theta: ParamSet,
    /// Head initialization; also the working head between episodes.
    pub phi: ParamSet,
    pub t: u64,
    pub seed: u64,
    pub opt_theta: Nesterov,
    pub opt_phi: Nesterov,
    pub best: Option<Snapshot>,
    pub initial_val: Option<f64>,
}

impl MetaState {
    pub fn new(net: &SegNet, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let (theta, phi) = net.init(seed)?;
        Ok(Self {
            theta,
            phi: phi.with_role(crate::tensorcore::ParamRole::HeadInit),
            t: 0,
            seed,
            opt_theta: Nesterov::new(cfg.momentum, cfg.weight_decay),
            opt_phi: Nesterov::new(cfg.momentum, cfg.weight_decay),
            best: None,
            initial_val: None,
        })
    }

    /// RNG for episode `t`, independent of how many episodes ran before it
    /// in this process.
    pub fn episode_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.t + 1);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub t: u64,
    pub lr: f64,
    pub inner_dataset: usize,
    pub outer_datasets: Vec<usize>,
    pub inner_loss: f64,
    pub mfl_loss: f64,
    pub mfl_seg: f64,
    pub mfl_inter: f64,
    pub mfl_intra: f64,
    pub mil_loss: f64,
    pub hypergrad_total: f64,
    pub hypergrad_direct: f64,
    pub hypergrad_indirect: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fd_max_rel_err: Option<f64>,
}

impl EpisodeTrace {
    pub fn is_finite(&self) -> bool {
        [
            self.lr,
            self.inner_loss,
            self.mfl_loss,
            self.mfl_seg,
            self.mfl_inter,
            self.mfl_intra,
            self.mil_loss,
            self.hypergrad_total,
            self.hypergrad_direct,
            self.hypergrad_indirect,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn empty_reps() -> TissueReps {
    TissueReps {
        reps: vec![],
        valid: vec![],
    }
}

/// Result of the MFL forward pass: inner update then outer loss.
pub struct MflForward {
    pub total: Tensor,
    pub seg: f64,
    pub inter: f64,
    pub intra: f64,
    pub omega_star: ParamSet,
    pub inner_losses: Vec<f64>,
}

/// Runs the inner update from `phi` on `inner` and evaluates the outer loss
/// at `ω*` on the two `outer` batches. `theta` may be tracked (its tape is
/// then reused) or plain.
#[allow(clippy::too_many_arguments)]
pub fn mfl_forward(
    net: &SegNet,
    theta: &ParamSet,
    phi: &ParamSet,
    inner: &Batch,
    outer: [&Batch; 2],
    inner_lr: f64,
    inner_steps: usize,
    mode: HypergradMode,
    weights: &LossWeights,
) -> Result<MflForward> {
    let tape = params_tape(theta).unwrap_or_default();
    let omega = phi.detach().attach(&tape);
    let (omega_star, inner_losses) = inner_step(&omega, inner_lr, inner_steps, mode, |w| {
        let (_, logits) = net.forward(theta, w, &inner.images)?;
        seg_loss(&logits, &inner.labels, weights)
    })?;
    let need_reps = weights.beta != 0.0 || weights.gamma != 0.0;
    let mut parts = Vec::with_capacity(2);
    for b in outer {
        let (pyr, logits) = net.forward(theta, &omega_star, &b.images)?;
        let reps = if need_reps {
            tissue_representations(&pyr, &b.labels)?
        } else {
            empty_reps()
        };
        parts.push((logits, reps));
    }
    let views = [
        OuterView {
            logits: &parts[0].0,
            labels: &outer[0].labels,
            reps: &parts[0].1,
        },
        OuterView {
            logits: &parts[1].0,
            labels: &outer[1].labels,
            reps: &parts[1].1,
        },
    ];
    let l = outer_loss(&views, weights)?;
    Ok(MflForward {
        total: l.total,
        seg: l.seg,
        inter: l.inter,
        intra: l.intra,
        omega_star,
        inner_losses,
    })
}

/// Mean segmentation loss over several batches at fixed parameters.
pub fn mean_seg_loss(net: &SegNet, theta: &ParamSet, omega: &ParamSet, batches: &[&Batch], weights: &LossWeights) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for b in batches {
        let (_, logits) = net.forward(theta, omega, &b.images)?;
        let l = seg_loss(&logits, &b.labels, weights)?;
        acc = Some(match acc {
            None => l,
            Some(a) => a.add(&l)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::Config("no batches".into()))?;
    Ok(acc.scale(1.0 / batches.len() as f64)?)
}

fn check_source(source: &dyn BatchSource) -> Result<()> {
    if source.num_datasets() != 3 {
        return Err(Error::Config(format!(
            "meta-training needs exactly 3 datasets, got {}",
            source.num_datasets()
        )));
    }
    Ok(())
}

/// Inner dataset drawn uniformly from three, and the other two in
/// ascending order.
pub fn sample_episode_datasets(rng: &mut ChaCha8Rng) -> (usize, [usize; 2]) {
    let x = rng.random_range(0..3usize);
    let others = [(x + 1) % 3, (x + 2) % 3];
    (x, if others[0] < others[1] { others } else { [others[1], others[0]] })
}

/// One episode: inner step on a random dataset, MFL update of θ through
/// the inner step, first-order MIL update of φ. `state` is only modified on
/// success.
pub fn run_episode(net: &SegNet, state: &mut MetaState, source: &dyn BatchSource, cfg: &TrainConfig) -> Result<EpisodeTrace> {
    check_source(source)?;
    let mut rng = state.episode_rng();
    let lr = cfg.lr_at(state.t);
    let inner_lr = cfg.inner_lr_at(state.t);
    let (x, others) = sample_episode_datasets(&mut rng);
    let inner = source.sample(x, cfg.batch_size, &mut rng)?;
    let outer_a = source.sample(others[0], cfg.batch_size, &mut rng)?;
    let outer_b = source.sample(others[1], cfg.batch_size, &mut rng)?;

    let tape = Tape::new();
    let theta_l = state.theta.attach(&tape);
    let fwd = mfl_forward(
        net,
        &theta_l,
        &state.phi,
        &inner,
        [&outer_a, &outer_b],
        inner_lr,
        cfg.inner_steps,
        cfg.hypergrad_mode,
        &cfg.loss,
    )?;
    let mfl_loss = fwd.total.item();
    if !mfl_loss.is_finite() {
        return Err(Error::Numerical(format!("MFL outer loss is {mfl_loss}")));
    }
    let hg = hypergradient(&fwd.total, &theta_l, &fwd.omega_star)?;
    drop(theta_l);
    let omega_star = fwd.omega_star.detach();
    drop(tape);

    let fd_max_rel_err = if cfg.hypergrad_mode == HypergradMode::FiniteDiffCheck {
        let composed = |th: &ParamSet| -> Result<Tensor> {
            Ok(mfl_forward(
                net,
                th,
                &state.phi,
                &inner,
                [&outer_a, &outer_b],
                inner_lr,
                cfg.inner_steps,
                HypergradMode::Exact,
                &cfg.loss,
            )?
            .total)
        };
        Some(check_hypergradient(composed, &state.theta, 1e-4, cfg.fd_param_limit)?.max_rel_err)
    } else {
        None
    };

    let mut opt_theta = state.opt_theta.clone();
    let theta_next = mfl_outer_step(&state.theta, &hg, &mut opt_theta, lr)?;

    let (mil_a, mil_b) = if cfg.shared_outer_batches {
        (outer_a, outer_b)
    } else {
        (
            source.sample(others[0], cfg.batch_size, &mut rng)?,
            source.sample(others[1], cfg.batch_size, &mut rng)?,
        )
    };
    let mut opt_phi = state.opt_phi.clone();
    let (phi_next, _, mil_loss) = mil_outer_step(&state.phi, &omega_star, &mut opt_phi, lr, |w| {
        mean_seg_loss(net, &theta_next, w, &[&mil_a, &mil_b], &cfg.loss)
    })?;

    let (total, direct, indirect) = hg.norms();
    let trace = EpisodeTrace {
        t: state.t,
        lr,
        inner_dataset: x,
        outer_datasets: others.to_vec(),
        inner_loss: fwd.inner_losses[0],
        mfl_loss,
        mfl_seg: fwd.seg,
        mfl_inter: fwd.inter,
        mfl_intra: fwd.intra,
        mil_loss,
        hypergrad_total: total,
        hypergrad_direct: direct,
        hypergrad_indirect: indirect,
        fd_max_rel_err,
    };
    if !trace.is_finite() {
        return Err(Error::Numerical(format!("non-finite values in episode {}", state.t)));
    }
    state.theta = theta_next;
    state.phi = phi_next;
    state.opt_theta = opt_theta;
    state.opt_phi = opt_phi;
    state.t += 1;
    Ok(trace)
}

/// One joint pre-training step: a mini-batch from every dataset, mean
/// segmentation loss, plain gradient update of θ and of the head.
pub fn joint_step(net: &SegNet, state: &mut MetaState, source: &dyn BatchSource, cfg: &TrainConfig) -> Result<EpisodeTrace> {
    let mut rng = state.episode_rng();
    let lr = cfg.lr_at(state.t);
    let batches = (0..source.num_datasets())
        .map(|d| source.sample(d, cfg.batch_size, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Batch> = batches.iter().collect();
    let tape = Tape::new();
    let theta_l = state.theta.attach(&tape);
    let phi_l = state.phi.attach(&tape);
    let loss = mean_seg_loss(net, &theta_l, &phi_l, &refs, &cfg.loss)?;
    let v = loss.item();
    if !v.is_finite() {
        return Err(Error::Numerical(format!("joint loss is {v}")));
    }
    let (gt, _) = theta_l.grad(&loss, GradOptions::first_order())?;
    let (gp, _) = phi_l.grad(&loss, GradOptions::first_order())?;
    let mut opt_theta = state.opt_theta.clone();
    let mut opt_phi = state.opt_phi.clone();
    let theta_next = opt_theta.step(&state.theta, &gt.detach(), lr)?;
    let phi_next = opt_phi.step(&state.phi, &gp.detach(), lr)?;
    let trace = EpisodeTrace {
        t: state.t,
        lr,
        inner_dataset: 0,
        outer_datasets: (0..source.num_datasets()).collect(),
        inner_loss: v,
        mfl_loss: 0.0,
        mfl_seg: 0.0,
        mfl_inter: 0.0,
        mfl_intra: 0.0,
        mil_loss: 0.0,
        hypergrad_total: gt.norm(),
        hypergrad_direct: gt.norm(),
        hypergrad_indirect: 0.0,
        fd_max_rel_err: None,
    };
    state.theta = theta_next;
    state.phi = phi_next;
    state.opt_theta = opt_theta;
    state.opt_phi = opt_phi;
    state.t += 1;
    Ok(trace)
}

/// Mean segmentation loss over every dataset's validation split.
pub fn validation_loss(net: &SegNet, theta: &ParamSet, phi: &ParamSet, source: &dyn BatchSource, weights: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for d in 0..source.num_datasets() {
        if let Some(b) = source.validation(d)? {
            total += mean_seg_loss(net, &theta.detach(), &phi.detach(), &[&b], weights)?.item();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Config("no validation data".into()));
    }
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Episodic bi-level training.
    Dumeta,
    /// Plain multi-dataset training of the whole network.
    Joint,
}

pub enum TrainEvent<'a> {
    Episode(&'a EpisodeTrace),
    Checkpoint { state: &'a MetaState, val_loss: f64, is_best: bool },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: MetaState,
    pub best: Snapshot,
    pub initial_val: f64,
    pub traces: Vec<EpisodeTrace>,
    pub val_history: Vec<(u64, f64)>,
    /// Set when training stopped early on a numerical failure; `best` then
    /// holds the last good checkpoint.
    pub diverged: Option<String>,
}

fn record_checkpoint(
    net: &SegNet,
    state: &mut MetaState,
    source: &dyn BatchSource,
    cfg: &TrainConfig,
    history: &mut Vec<(u64, f64)>,
    hook: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<()> {
    let v = validation_loss(net, &state.theta, &state.phi, source, &cfg.loss)?;
    history.push((state.t, v));
    if state.initial_val.is_none() {
        state.initial_val = Some(v);
    }
    let is_best = v.is_finite() && state.best.as_ref().is_none_or(|b| v < b.val_loss);
    if is_best {
        state.best = Some(Snapshot {
            theta: state.theta.clone(),
            phi: state.phi.clone(),
            t: state.t,
            val_loss: v,
        });
    }
    hook(TrainEvent::Checkpoint {
        state,
        val_loss: v,
        is_best,
    })
}

/// Runs episodes until `cfg.episodes`, validating every
/// `cfg.checkpoint_every` episodes and at both ends. Resumes from
/// `state.t`.
pub fn meta_train(
    net: &SegNet,
    source: &dyn BatchSource,
    cfg: &TrainConfig,
    algorithm: Algorithm,
    mut state: MetaState,
    hook: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if algorithm == Algorithm::Dumeta {
        check_source(source)?;
    }
    let mut traces = Vec::new();
    let mut history = Vec::new();
    if state.best.is_none() {
        record_checkpoint(net, &mut state, source, cfg, &mut history, hook)?;
    }
    let mut diverged = None;
    while state.t < cfg.episodes {
        let step = match algorithm {
            Algorithm::Dumeta => run_episode(net, &mut state, source, cfg),
            Algorithm::Joint => joint_step(net, &mut state, source, cfg),
        };
        match step {
            Ok(trace) => {
                hook(TrainEvent::Episode(&trace))?;
                traces.push(trace);
            }
            Err(Error::Numerical(msg)) => {
                diverged = Some(format!("episode {}: {msg}", state.t));
                break;
            }
            Err(Error::Tensor(e @ (crate::tensorcore::TensorError::NonFinite(_) | crate::tensorcore::TensorError::Domain { .. }))) => {
                diverged = Some(format!("episode {}: {e}", state.t));
                break;
            }
            Err(e) => return Err(e),
        }
        let at_end = state.t == cfg.episodes;
        if at_end || (cfg.checkpoint_every > 0 && state.t % cfg.checkpoint_every == 0) {
            record_checkpoint(net, &mut state, source, cfg, &mut history, hook)?;
        }
    }
    let best = state
        .best
        .clone()
        .ok_or_else(|| Error::Numerical("no finite validation loss was ever recorded".into()))?;
    Ok(TrainOutcome {
        initial_val: state.initial_val.unwrap_or(f64::NAN),
        best,
        state,
        traces,
        val_history: history,
        diverged,
    })
}
