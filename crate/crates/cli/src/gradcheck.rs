//! Finite-difference verification of the hypergradient on a quadratic toy
//! and on a tiny segmentation network fed one phantom batch.

use duometa::config::ExperimentConfig;
use duometa::labels::Batch;
use duometa::losses::LossWeights;
use duometa::meta::{check_hypergradient, hypergradient, inner_step, mfl_forward, params_tape, HypergradMode};
use duometa::phantoms::{generate_subject, subjects_batch, AgeGroupSpec};
use duometa::segnet::{NetConfig, SegNet};
use duometa::tensorcore::{ParamRole, ParamSet, Tape, Tensor};
use duometa::Result;
use serde::Serialize;

pub const TOY_TOLERANCE: f64 = 1e-8;
pub const SEGNET_TOLERANCE: f64 = 1e-5;
/// Relative finite-difference step.
pub const FD_EPS: f64 = 1e-4;
/// Inner step size for the checks; large enough that the indirect term is
/// far above rounding noise.
pub const CHECK_INNER_LR: f64 = 0.1;

#[derive(Clone, Debug, Serialize)]
pub struct ToyCheck {
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SegnetCheck {
    pub params: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub norm_rel_err: f64,
    /// Elements whose finite-difference step was shrunk to avoid a relu kink.
    pub shrunk: usize,
    pub kink_limited: usize,
    pub tolerance: f64,
    pub pass: bool,
    pub direct_norm: f64,
    pub indirect_norm_exact: f64,
    pub indirect_norm_first_order: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub toy: ToyCheck,
    pub segnet: SegnetCheck,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.toy.pass && self.segnet.pass
    }

    pub fn render(&self) -> String {
        let verdict = |p: bool| if p { "PASS" } else { "FAIL" };
        let s = &self.segnet;
        format!(
            "quadratic toy      max rel err {:.3e} (< {:.0e})  {}\n\
             tiny segnet        max rel err {:.3e} (< {:.0e})  {}  [{} params, {} checked, {} steps shrunk at kinks]\n\
             hypergradient norms: direct {:.4e}  indirect exact {:.4e}  indirect first-order {:.4e}\n",
            self.toy.max_rel_err,
            self.toy.tolerance,
            verdict(self.toy.pass),
            s.max_rel_err,
            s.tolerance,
            verdict(s.pass),
            s.params,
            s.checked,
            s.shrunk,
            s.direct_norm,
            s.indirect_norm_exact,
            s.indirect_norm_first_order,
        )
    }
}

fn vector(role: ParamRole, name: &str, v: &[f64]) -> ParamSet {
    let mut p = ParamSet::new(role);
    p.insert(name, Tensor::from_slice(v, &[v.len()]).expect("vector")).expect("fresh set");
    p
}

/// θ, ω ∈ R³; L_in = ‖ω − θ‖² + θ₀ω₁, L_out = ‖ω*‖² + θ₂ω*₀. Both the direct
/// and the indirect path carry signal.
pub fn quadratic_toy(theta: &ParamSet, alpha: f64) -> Result<Tensor> {
    let tape = params_tape(theta).unwrap_or_default();
    let omega = vector(ParamRole::Head, "omega", &[0.3, -0.2, 0.5]).attach(&tape);
    let th = theta.get("theta")?.clone();
    let (ws, _) = inner_step(&omega, alpha, 1, HypergradMode::Exact, |w| {
        let w = w.get("omega")?;
        let d = w.sub(&th)?;
        Ok(d.mul(&d)?.sum_all()?.add(&th.narrow(0, 0, 1)?.mul(&w.narrow(0, 1, 1)?)?.sum_all()?)?)
    })?;
    let w = ws.get("omega")?;
    Ok(w.mul(w)?.sum_all()?.add(&th.narrow(0, 2, 1)?.mul(&w.narrow(0, 0, 1)?)?.sum_all()?)?)
}

pub fn check_toy() -> Result<ToyCheck> {
    let theta = vector(ParamRole::Extractor, "theta", &[1.0, -0.7, 0.4]);
    let r = check_hypergradient(|t: &ParamSet| quadratic_toy(t, CHECK_INNER_LR), &theta, FD_EPS, 100)?;
    Ok(ToyCheck {
        max_rel_err: r.max_rel_err,
        tolerance: TOY_TOLERANCE,
        pass: r.max_rel_err < TOY_TOLERANCE,
    })
}

pub fn tiny_net() -> Result<SegNet> {
    SegNet::new(NetConfig {
        scales: 2,
        base_width: 2,
        image_size: 16,
        ..NetConfig::default()
    })
}

/// One inner batch from the first training group and one outer batch from
/// each of the other two, at 16×16.
pub fn phantom_batches(seed: u64) -> Result<[Batch; 3]> {
    let specs = AgeGroupSpec::defaults();
    let mut out = Vec::with_capacity(3);
    for (g, spec) in specs.iter().take(3).enumerate() {
        let a = generate_subject(spec, 16, seed.wrapping_mul(31).wrapping_add(2 * g as u64), "a")?;
        let b = generate_subject(spec, 16, seed.wrapping_mul(31).wrapping_add(2 * g as u64 + 1), "b")?;
        out.push(subjects_batch(&[&a, &b])?);
    }
    Ok(out.try_into().map_err(|_| duometa::Error::Config("batch count".into()))?)
}

pub fn check_segnet(cfg: &ExperimentConfig) -> Result<SegnetCheck> {
    let net = tiny_net()?;
    let (theta, phi) = net.init(cfg.seed)?;
    let [inner, a, b] = phantom_batches(cfg.seed)?;
    let weights = LossWeights {
        deep_supervision: LossWeights::for_scales(2).deep_supervision,
        ..cfg.train.loss.clone()
    };
    let composed = |th: &ParamSet| -> Result<Tensor> {
        Ok(mfl_forward(&net, th, &phi, &inner, [&a, &b], CHECK_INNER_LR, 1, HypergradMode::Exact, &weights)?.total)
    };
    let r = check_hypergradient(composed, &theta, FD_EPS, cfg.train.fd_param_limit)?;
    let norms = |mode: HypergradMode| -> Result<(f64, f64)> {
        let tape = Tape::new();
        let th = theta.attach(&tape);
        let f = mfl_forward(&net, &th, &phi, &inner, [&a, &b], CHECK_INNER_LR, 1, mode, &weights)?;
        let (_, direct, indirect) = hypergradient(&f.total, &th, &f.omega_star)?.norms();
        Ok((direct, indirect))
    };
    let (direct, indirect_exact) = norms(HypergradMode::Exact)?;
    let (_, indirect_first) = norms(HypergradMode::FirstOrder)?;
    Ok(SegnetCheck {
        params: theta.numel(),
        checked: r.checked,
        max_rel_err: r.max_rel_err,
        norm_rel_err: r.norm_rel_err,
        shrunk: r.shrunk,
        kink_limited: r.kink_limited,
        tolerance: SEGNET_TOLERANCE,
        pass: r.max_rel_err < SEGNET_TOLERANCE,
        direct_norm: direct,
        indirect_norm_exact: indirect_exact,
        indirect_norm_first_order: indirect_first,
    })
}

pub fn run(cfg: &ExperimentConfig) -> Result<GradcheckReport> {
    Ok(GradcheckReport {
        toy: check_toy()?,
        segnet: check_segnet(cfg)?,
    })
}
