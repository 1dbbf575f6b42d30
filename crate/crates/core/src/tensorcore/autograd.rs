//! Reverse-mode differentiation over a [`Tape`].
//!
//! Each vector-Jacobian product is written with ordinary tensor ops. With
//! `create_graph` the saved inputs keep their tape binding, so the returned
//! gradients are tape nodes and can be differentiated again.

use std::collections::HashSet;

use super::error::{Result, TensorError};
use super::tape::{Op, Tape};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default)]
pub struct GradOptions {
    /// Record the backward pass so its results are differentiable.
    pub create_graph: bool,
    /// Keep the graph usable for further backward passes. Implied by
    /// `create_graph`.
    pub retain_graph: bool,
}

impl GradOptions {
    pub fn first_order() -> Self {
        Self {
            create_graph: false,
            retain_graph: true,
        }
    }

    pub fn create_graph() -> Self {
        Self {
            create_graph: true,
            retain_graph: true,
        }
    }
}

/// Gradients for each requested tensor plus a per-target flag that is
/// `false` when the target is not reachable from the output (its gradient is
/// then all zeros).
#[derive(Clone, Debug)]
pub struct Grads {
    pub grads: Vec<Tensor>,
    pub reachable: Vec<bool>,
}

/// Sum-reduces a broadcast gradient back to a scalar operand's shape.
fn unbroadcast(g: Tensor, operand: &Tensor) -> Result<Tensor> {
    if g.numel() == operand.numel() {
        Ok(g)
    } else {
        g.sum_all()?.reshape(operand.shape())
    }
}

fn vjp(op: &Op, ins: &[Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
    Ok(match op {
        Op::Leaf | Op::Const => vec![],
        Op::Add => vec![unbroadcast(g.clone(), &ins[0])?, unbroadcast(g.clone(), &ins[1])?],
        Op::Sub => vec![unbroadcast(g.clone(), &ins[0])?, unbroadcast(g.neg()?, &ins[1])?],
        Op::Mul => vec![
            unbroadcast(g.mul(&ins[1])?, &ins[0])?,
            unbroadcast(g.mul(&ins[0])?, &ins[1])?,
        ],
        Op::Div => {
            let ga = g.div(&ins[1])?;
            let gb = g.mul(out)?.div(&ins[1])?.neg()?;
            vec![unbroadcast(ga, &ins[0])?, unbroadcast(gb, &ins[1])?]
        }
        Op::Neg => vec![g.neg()?],
        Op::Scale(c) => vec![g.scale(*c)?],
        Op::Shift(_) => vec![g.clone()],
        Op::Relu => {
            let mask: Vec<f64> = ins[0].data().iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
            vec![g.mul(&Tensor::new(mask, ins[0].shape())?)?]
        }
        Op::Exp => vec![g.mul(out)?],
        Op::Log => vec![g.div(&ins[0])?],
        Op::Pow(p) => {
            let d = if *p == 2.0 {
                ins[0].scale(2.0)?
            } else {
                ins[0].pow(p - 1.0)?.scale(*p)?
            };
            vec![g.mul(&d)?]
        }
        Op::MatMul => vec![
            g.matmul(&ins[1].transpose()?)?,
            ins[0].transpose()?.matmul(g)?,
        ],
        Op::Reshape => vec![g.reshape(ins[0].shape())?],
        Op::Gather(plan) => vec![g.scatter(plan.clone(), ins[0].shape())?],
        Op::Scatter(plan) => vec![g.gather(plan.clone(), ins[0].shape())?],
    })
}

/// Computes d`output`/d`wrt` for a scalar `output`.
pub fn grad(output: &Tensor, wrt: &[&Tensor], opts: GradOptions) -> Result<Grads> {
    grad_blocked(output, wrt, &[], opts)
}

/// Like [`grad`], but no adjoint flows through the nodes of `blocked`.
///
/// Blocking an intermediate tensor gives the partial derivative that holds it
/// fixed, e.g. the direct term of a total derivative.
pub fn grad_blocked(output: &Tensor, wrt: &[&Tensor], blocked: &[&Tensor], opts: GradOptions) -> Result<Grads> {
    if output.numel() != 1 {
        return Err(TensorError::NotScalar(output.shape().to_vec()));
    }
    let seed = Tensor::ones(output.shape());
    vjp_many(&[(output, seed)], wrt, blocked, opts)
}

/// Vector-Jacobian product: propagates each `(tensor, cotangent)` seed back
/// to `wrt`.
pub fn vjp_many(
    seeds: &[(&Tensor, Tensor)],
    wrt: &[&Tensor],
    blocked: &[&Tensor],
    opts: GradOptions,
) -> Result<Grads> {
    let zeros = || -> Grads {
        Grads {
            grads: wrt.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            reachable: vec![false; wrt.len()],
        }
    };
    let mut tape: Option<Tape> = None;
    for (t, _) in seeds {
        match (t.tape(), &tape) {
            (None, _) => {}
            (Some(tp), None) => tape = Some(tp.clone()),
            (Some(tp), Some(existing)) if !tp.same(existing) => return Err(TensorError::TapeMismatch),
            _ => {}
        }
    }
    let Some(tape) = tape else {
        return Ok(zeros());
    };
    for t in wrt {
        if let Some(tp) = t.tape() {
            if !tp.same(&tape) {
                return Err(TensorError::TapeMismatch);
            }
        }
    }

    let top = seeds.iter().filter_map(|(t, _)| t.node_id()).max().expect("tracked seed");
    tape.check_live(top)?;
    let nodes: Vec<(Op, Vec<usize>)> = {
        let inner = tape.inner.lock();
        inner.nodes[..=top].iter().map(|n| (n.op.clone(), n.inputs.clone())).collect()
    };

    let target_ids: Vec<Option<usize>> = wrt.iter().map(|t| t.node_id()).collect();
    let targets: HashSet<usize> = target_ids.iter().flatten().copied().collect();
    let blocked: HashSet<usize> = blocked.iter().filter_map(|t| t.node_id()).collect();

    // A node needs an adjoint only if some target lies upstream of it.
    let mut needed = vec![false; top + 1];
    for (id, (op, inputs)) in nodes.iter().enumerate() {
        needed[id] = targets.contains(&id)
            || (!matches!(op, Op::Const | Op::Leaf) && !blocked.contains(&id) && inputs.iter().any(|&i| needed[i]));
    }

    let mut adj: Vec<Option<Tensor>> = vec![None; top + 1];
    for (t, cot) in seeds {
        if let Some(id) = t.node_id() {
            if cot.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "vjp seed",
                    lhs: cot.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            let cot = if opts.create_graph { cot.clone() } else { cot.detach() };
            adj[id] = Some(match adj[id].take() {
                None => cot,
                Some(a) => a.add(&cot)?,
            });
        }
    }

    for id in (0..=top).rev() {
        if !needed[id] || blocked.contains(&id) {
            continue;
        }
        let (op, inputs) = &nodes[id];
        if matches!(op, Op::Leaf | Op::Const) {
            continue;
        }
        let Some(g) = (if targets.contains(&id) { adj[id].clone() } else { adj[id].take() }) else {
            continue;
        };
        let node = tape.node(id);
        let out = Tensor::from_node(&tape, id, &node, opts.create_graph);
        let ins: Vec<Tensor> = inputs
            .iter()
            .map(|&i| Tensor::from_node(&tape, i, &tape.node(i), opts.create_graph && !matches!(nodes[i].0, Op::Const)))
            .collect();
        let g = if opts.create_graph { g } else { g.detach() };
        let gins = vjp(op, &ins, &out, &g)?;
        for (&i, gi) in inputs.iter().zip(gins) {
            if !needed[i] {
                continue;
            }
            adj[i] = Some(match adj[i].take() {
                None => gi,
                Some(a) => a.add(&gi)?,
            });
        }
    }

    if !opts.retain_graph && !opts.create_graph {
        tape.release_below(top + 1);
    }

    let mut out = zeros();
    for (k, id) in target_ids.iter().enumerate() {
        if let Some(g) = id.filter(|&id| id <= top).and_then(|id| adj[id].clone()) {
            out.grads[k] = g;
            out.reachable[k] = true;
        }
    }
    Ok(out)
}
