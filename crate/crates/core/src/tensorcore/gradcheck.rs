//! Central finite-difference checks against analytic gradients.

use serde::Serialize;

use super::autograd::GradOptions;
use super::error::{Result, TensorError};
use super::params::ParamSet;
use super::tape::{KinkProbe, Tape};
use super::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// False when the analytic gradient reported the parameter unreachable.
    pub reachable: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)` over every checked element.
    pub norm_rel_err: f64,
    pub checked: usize,
    /// Elements whose step had to shrink to stay on one smooth piece.
    pub shrunk: usize,
    /// Elements for which no kink-free step was found; their error uses the
    /// smallest step tried.
    pub kink_limited: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Which elements of each entry to check; `None` checks everything.
pub type Selection = Option<Vec<(String, usize)>>;

/// Step halvings tried before giving up on a kink-free interval.
const MAX_HALVINGS: u32 = 12;

/// Value of `f` plus the relu sign pattern of the evaluation.
fn eval_detached<F>(f: &F, params: &ParamSet) -> Result<(f64, u64)>
where
    F: Fn(&ParamSet) -> Result<Tensor>,
{
    let probe = KinkProbe::start();
    let v = f(params)?;
    let pattern = probe.pattern();
    drop(probe);
    if v.numel() != 1 {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite("gradcheck objective"));
    }
    Ok((v, pattern))
}

/// Compares analytic gradients of `f` at `params` with central differences
/// `(f(p+eps) − f(p−eps)) / 2eps`, element by element. When either probe
/// lands on a different relu sign pattern than `p` the step is halved, so
/// the difference never straddles a kink.
pub fn check_grad<F>(f: F, params: &ParamSet, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<Tensor>,
{
    check_grad_selected(f, params, eps, None)
}

pub fn check_grad_selected<F>(f: F, params: &ParamSet, eps: f64, select: Selection) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(TensorError::Invalid {
            op: "check_grad",
            msg: "eps must be positive".into(),
        });
    }
    let tape = Tape::new();
    let attached = params.attach(&tape);
    let loss = f(&attached)?;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite("gradcheck objective"));
    }
    let (analytic, reachable) = attached.grad(&loss, GradOptions::first_order())?;

    let base = params.detach();
    let mut report = GradCheckReport {
        params: vec![],
        max_rel_err: 0.0,
        mean_rel_err: 0.0,
        norm_rel_err: 0.0,
        checked: 0,
        shrunk: 0,
        kink_limited: 0,
    };
    let (_, base_pattern) = eval_detached(&f, &base)?;
    let (mut diff2, mut a2, mut n2, mut sum_rel) = (0.0, 0.0, 0.0, 0.0);
    for (k, (name, t)) in base.iter().enumerate() {
        let indices: Vec<usize> = match &select {
            None => (0..t.numel()).collect(),
            Some(sel) => sel.iter().filter(|(n, _)| n == name).map(|(_, i)| *i).collect(),
        };
        if indices.is_empty() {
            continue;
        }
        let a = analytic.get(name)?.data().to_vec();
        let mut pc = ParamCheck {
            name: name.to_string(),
            checked: 0,
            max_rel_err: 0.0,
            mean_rel_err: 0.0,
            reachable: reachable[k],
        };
        for i in indices {
            let probe = |delta: f64| -> Result<(f64, u64)> {
                let mut v = t.to_vec();
                v[i] += delta;
                let mut p = base.clone();
                p.set(name, Tensor::new(v, t.shape())?)?;
                eval_detached(&f, &p)
            };
            let mut step = eps;
            let mut halvings = 0;
            let numeric = loop {
                let (fp, hp) = probe(step)?;
                let (fm, hm) = probe(-step)?;
                let smooth = hp == base_pattern && hm == base_pattern;
                if smooth || halvings == MAX_HALVINGS {
                    if !smooth {
                        report.kink_limited += 1;
                    } else if halvings > 0 {
                        report.shrunk += 1;
                    }
                    break (fp - fm) / (2.0 * step);
                }
                step *= 0.5;
                halvings += 1;
            };
            let e = rel_err(a[i], numeric);
            pc.checked += 1;
            pc.max_rel_err = pc.max_rel_err.max(e);
            pc.mean_rel_err += e;
            diff2 += (a[i] - numeric).powi(2);
            a2 += a[i] * a[i];
            n2 += numeric * numeric;
        }
        report.checked += pc.checked;
        sum_rel += pc.mean_rel_err;
        pc.mean_rel_err /= pc.checked as f64;
        report.max_rel_err = report.max_rel_err.max(pc.max_rel_err);
        report.params.push(pc);
    }
    if report.checked > 0 {
        report.mean_rel_err = sum_rel / report.checked as f64;
    }
    let denom = a2.sqrt().max(n2.sqrt());
    report.norm_rel_err = if denom > 0.0 { diff2.sqrt() / denom } else { 0.0 };
    Ok(report)
}
