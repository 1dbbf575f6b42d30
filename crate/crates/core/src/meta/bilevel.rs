//! The three building blocks of an episode, written over plain loss
//! closures so they apply to any differentiable model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::{check_grad, grad, grad_blocked, GradCheckReport, GradOptions, ParamSet, Tape, Tensor, TensorError};

use super::optim::Nesterov;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HypergradMode {
    /// Differentiate through the recorded inner update.
    #[default]
    Exact,
    /// Treat the inner gradient as a constant, dropping the indirect path.
    FirstOrder,
    /// Exact, plus a finite-difference comparison of the whole map.
    FiniteDiffCheck,
}

impl HypergradMode {
    pub fn second_order(self) -> bool {
        !matches!(self, HypergradMode::FirstOrder)
    }
}

impl std::str::FromStr for HypergradMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "first-order" => Ok(Self::FirstOrder),
            "finite-diff-check" => Ok(Self::FiniteDiffCheck),
            _ => Err(Error::Config(format!(
                "unknown hypergrad mode {s:?} (exact, first-order, finite-diff-check)"
            ))),
        }
    }
}

/// The tape the tracked entries of `params` live on, if any.
pub fn params_tape(params: &ParamSet) -> Option<Tape> {
    params.iter().find_map(|(_, t)| t.tape().cloned())
}

/// `steps` unrolled updates `ω ← ω − α·∂L/∂ω`, starting from `omega`
/// (which should be tracked). In second-order modes each gradient is
/// recorded, so the result stays a differentiable function of everything
/// the loss depends on. Returns `ω*` and the loss before each update.
pub fn inner_step<F>(omega: &ParamSet, alpha: f64, steps: usize, mode: HypergradMode, mut loss: F) -> Result<(ParamSet, Vec<f64>)>
where
    F: FnMut(&ParamSet) -> Result<Tensor>,
{
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::Config(format!("inner learning rate {alpha}")));
    }
    let opts = if mode.second_order() {
        GradOptions::create_graph()
    } else {
        GradOptions::first_order()
    };
    let mut w = omega.clone();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let l = loss(&w)?;
        let v = l.item();
        if !v.is_finite() {
            return Err(Error::Numerical(format!("inner loss is {v}")));
        }
        losses.push(v);
        if !l.is_tracked() {
            continue;
        }
        let (g, _) = w.grad(&l, opts)?;
        let mut next = Vec::with_capacity(w.len());
        for ((_, p), (_, gi)) in w.iter().zip(g.iter()) {
            next.push(if alpha == 0.0 { p.clone() } else { p.sub(&gi.scale(alpha)?)? });
        }
        w = w.with_values(next)?;
    }
    Ok((w, losses))
}

#[derive(Clone, Debug)]
pub struct Hypergrad {
    pub total: ParamSet,
    /// Holds `ω*` fixed.
    pub direct: ParamSet,
    /// `total − direct`: the part that flows through the inner update.
    pub indirect: ParamSet,
}

impl Hypergrad {
    pub fn norms(&self) -> (f64, f64, f64) {
        (self.total.norm(), self.direct.norm(), self.indirect.norm())
    }
}

/// Gradient of `loss` with respect to the tracked `theta`, split into the
/// direct and indirect terms of the total derivative through `omega_star`.
pub fn hypergradient(loss: &Tensor, theta: &ParamSet, omega_star: &ParamSet) -> Result<Hypergrad> {
    let wrt = theta.tensors();
    let blocked = omega_star.tensors();
    let direct = grad_blocked(loss, &wrt, &blocked, GradOptions::first_order())?;
    let direct = theta.with_values(direct.grads)?;
    let total = theta.with_values(grad(loss, &wrt, GradOptions::first_order())?.grads)?;
    let indirect = total.with_values(
        total
            .iter()
            .zip(direct.iter())
            .map(|((_, t), (_, d))| t.sub(d))
            .collect::<std::result::Result<_, _>>()?,
    )?;
    let hg = Hypergrad { total, direct, indirect };
    if !hg.total.iter().all(|(_, t)| t.is_finite()) {
        return Err(Error::Numerical("non-finite hypergradient".into()));
    }
    Ok(hg.detached())
}

impl Hypergrad {
    fn detached(self) -> Self {
        Self {
            total: self.total.detach(),
            direct: self.direct.detach(),
            indirect: self.indirect.detach(),
        }
    }
}

/// One MFL outer update of the extractor with a precomputed hypergradient.
pub fn mfl_outer_step(theta: &ParamSet, hypergrad: &Hypergrad, opt: &mut Nesterov, lr: f64) -> Result<ParamSet> {
    opt.step(&theta.detach(), &hypergrad.total, lr)
}

/// One first-order MIL update: the outer gradient is taken at `ω*` and
/// applied to the pre-inner snapshot `phi`. Returns `φ′`, the gradient and
/// the outer loss value.
pub fn mil_outer_step<F>(phi: &ParamSet, omega_star: &ParamSet, opt: &mut Nesterov, lr: f64, loss: F) -> Result<(ParamSet, ParamSet, f64)>
where
    F: FnOnce(&ParamSet) -> Result<Tensor>,
{
    let tape = Tape::new();
    let w = omega_star.detach().attach(&tape);
    let l = loss(&w)?;
    let v = l.item();
    if !v.is_finite() {
        return Err(Error::Numerical(format!("MIL outer loss is {v}")));
    }
    let (g, _) = w.grad(&l, GradOptions::first_order())?;
    let g = g.detach();
    if !g.iter().all(|(_, t)| t.is_finite()) {
        return Err(Error::Numerical("non-finite MIL gradient".into()));
    }
    let next = opt.step(&phi.detach(), &g, lr)?;
    Ok((next, g, v))
}

/// Compares the exact hypergradient of `composed` (θ ↦ outer loss after the
/// inner update, built on θ's tape) with central differences that rerun
/// the whole map. `eps` is scaled by the RMS of `theta`.
pub fn check_hypergradient<F>(composed: F, theta: &ParamSet, rel_eps: f64, param_limit: usize) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<Tensor>,
{
    if theta.numel() > param_limit {
        return Err(Error::Config(format!(
            "finite-difference check over {} parameters exceeds the limit of {param_limit}",
            theta.numel()
        )));
    }
    let n = theta.numel().max(1) as f64;
    let scale = (theta.norm() / n.sqrt()).max(1e-3);
    let f = |th: &ParamSet| {
        composed(th).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => TensorError::Invalid {
                op: "check_hypergradient",
                msg: other.to_string(),
            },
        })
    };
    Ok(check_grad(f, theta, rel_eps * scale)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::ParamRole;

    fn scalar_set(role: ParamRole, name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new(role);
        p.insert(name, Tensor::scalar(v)).unwrap();
        p
    }

    /// L_inner = (ω − θ)², returns (θ_l, ω*).
    fn toy_inner(tape: &Tape, theta: f64, omega: f64, alpha: f64, mode: HypergradMode) -> (ParamSet, ParamSet) {
        let th = scalar_set(ParamRole::Extractor, "theta", theta).attach(tape);
        let om = scalar_set(ParamRole::Head, "omega", omega).attach(tape);
        let t = th.get("theta").unwrap().clone();
        let (ws, _) = inner_step(&om, alpha, 1, mode, |w| Ok(w.get("omega")?.sub(&t)?.pow(2.0)?)).unwrap();
        (th, ws)
    }

    #[test]
    fn zero_step_is_identity() {
        let tape = Tape::new();
        let (_, ws) = toy_inner(&tape, 1.0, 0.3, 0.0, HypergradMode::Exact);
        assert_eq!(ws.get("omega").unwrap().item(), 0.3);
    }

    #[test]
    fn toy_inner_step_and_mixed_partial() {
        let tape = Tape::new();
        let (th, ws) = toy_inner(&tape, 1.0, 0.0, 0.1, HypergradMode::Exact);
        let w = ws.get("omega").unwrap();
        assert!((w.item() - 0.2).abs() < 1e-15);
        let d = grad(w, &[th.get("theta").unwrap()], GradOptions::first_order()).unwrap();
        assert!((d.grads[0].item() - 0.2).abs() < 1e-10);
    }

    #[test]
    fn toy_hypergradient_exact_and_first_order() {
        let tape = Tape::new();
        let (th, ws) = toy_inner(&tape, 1.0, 0.0, 0.1, HypergradMode::Exact);
        let loss = ws.get("omega").unwrap().pow(2.0).unwrap();
        let hg = hypergradient(&loss, &th, &ws).unwrap();
        assert!((hg.total.get("theta").unwrap().item() - 0.08).abs() < 1e-15);
        assert_eq!(hg.direct.get("theta").unwrap().item(), 0.0);
        // zeroing the indirect term removes exactly 2·ω*·∂ω*/∂θ
        assert!((hg.indirect.get("theta").unwrap().item() - 2.0 * 0.2 * 0.2).abs() < 1e-15);

        let tape = Tape::new();
        let (th, ws) = toy_inner(&tape, 1.0, 0.0, 0.1, HypergradMode::FirstOrder);
        let loss = ws.get("omega").unwrap().pow(2.0).unwrap();
        let hg = hypergradient(&loss, &th, &ws).unwrap();
        assert_eq!(hg.total.get("theta").unwrap().item(), 0.0);
        assert_eq!(hg.indirect.norm(), 0.0);
    }

    #[test]
    fn toy_hypergradient_matches_finite_differences() {
        let composed = |th: &ParamSet| -> Result<Tensor> {
            let tape = params_tape(th).unwrap_or_default();
            let om = scalar_set(ParamRole::Head, "omega", 0.0).attach(&tape);
            let t = th.get("theta")?.clone();
            let (ws, _) = inner_step(&om, 0.1, 1, HypergradMode::Exact, |w| Ok(w.get("omega")?.sub(&t)?.pow(2.0)?))?;
            Ok(ws.get("omega")?.pow(2.0)?)
        };
        let theta = scalar_set(ParamRole::Extractor, "theta", 1.0);
        let report = check_hypergradient(composed, &theta, 1e-4, 2000).unwrap();
        assert!(report.max_rel_err < 1e-8, "{}", report.max_rel_err);
        assert!(check_hypergradient(composed, &theta, 1e-4, 0).is_err());
    }

    #[test]
    fn mil_toy_update() {
        let phi = scalar_set(ParamRole::HeadInit, "omega", 0.0);
        let ws = scalar_set(ParamRole::Head, "omega", 0.2);
        let mut opt = Nesterov::plain();
        let (next, g, v) = mil_outer_step(&phi, &ws, &mut opt, 0.1, |w| Ok(w.get("omega")?.pow(2.0)?)).unwrap();
        assert!((v - 0.04).abs() < 1e-15);
        assert!((g.get("omega").unwrap().item() - 0.4).abs() < 1e-15);
        assert!((next.get("omega").unwrap().item() - (0.0 - 0.04)).abs() < 1e-15);
    }

    #[test]
    fn mil_direction_ignores_how_omega_star_was_reached() {
        // two inner losses that both land on ω* = 0.2 from ω = 0
        let mut results = vec![];
        for (target, alpha) in [(1.0, 0.1), (0.5, 0.2)] {
            let tape = Tape::new();
            let om = scalar_set(ParamRole::Head, "omega", 0.0).attach(&tape);
            let (ws, _) = inner_step(&om, alpha, 1, HypergradMode::Exact, |w| {
                Ok(w.get("omega")?.shift(-target)?.pow(2.0)?)
            })
            .unwrap();
            assert!((ws.get("omega").unwrap().item() - 0.2).abs() < 1e-15);
            let phi = scalar_set(ParamRole::HeadInit, "omega", 0.5);
            let mut opt = Nesterov::new(0.9, 3e-5);
            let (next, _, _) = mil_outer_step(&phi, &ws, &mut opt, 0.1, |w| Ok(w.get("omega")?.pow(2.0)?.scale(3.0)?)).unwrap();
            results.push(next.get("omega").unwrap().item());
        }
        assert_eq!(results[0].to_bits(), results[1].to_bits());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("first-order".parse::<HypergradMode>().unwrap(), HypergradMode::FirstOrder);
        assert!("second".parse::<HypergradMode>().is_err());
    }
}
