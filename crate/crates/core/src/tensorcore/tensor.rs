use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::error::{Result, TensorError};
use super::tape::{checked_mode, record_relu_signs, IndexPlan, Node, Op, Tape, HOLE};

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub tape: Tape,
    pub id: usize,
}

/// Dense row-major `f64` array, optionally bound to a node on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        }
        s.field("tracked", &self.node.is_some()).finish()
    }
}

impl PartialEq for Tensor {
    /// Value equality; tape membership is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn binary(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.len() == b.len() {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else if b.len() == 1 {
        let y = b[0];
        a.iter().map(|&x| f(x, y)).collect()
    } else {
        let x = a[0];
        b.iter().map(|&y| f(x, y)).collect()
    }
}

fn powi_like(x: f64, p: f64) -> f64 {
    if p == 2.0 {
        x * x
    } else if p == 1.0 {
        x
    } else if p == 0.5 {
        x.sqrt()
    } else if p == -1.0 {
        1.0 / x
    } else if p == -0.5 {
        1.0 / x.sqrt()
    } else {
        x.powf(p)
    }
}

/// Evaluates one op on raw input buffers. Shared by live execution and
/// tape replay so both produce identical bits.
pub(crate) fn forward(op: &Op, ins: &[(&[f64], &[usize])], out_shape: &[usize]) -> Vec<f64> {
    match op {
        Op::Leaf | Op::Const => unreachable!("leaf nodes are not evaluated"),
        Op::Add => binary(ins[0].0, ins[1].0, |x, y| x + y),
        Op::Sub => binary(ins[0].0, ins[1].0, |x, y| x - y),
        Op::Mul => binary(ins[0].0, ins[1].0, |x, y| x * y),
        Op::Div => binary(ins[0].0, ins[1].0, |x, y| x / y),
        Op::Neg => ins[0].0.iter().map(|x| -x).collect(),
        Op::Scale(c) => ins[0].0.iter().map(|x| x * c).collect(),
        Op::Shift(c) => ins[0].0.iter().map(|x| x + c).collect(),
        Op::Relu => {
            record_relu_signs(ins[0].0);
            ins[0].0.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
        }
        Op::Exp => ins[0].0.iter().map(|x| x.exp()).collect(),
        Op::Log => ins[0].0.iter().map(|x| x.ln()).collect(),
        Op::Pow(p) => ins[0].0.iter().map(|&x| powi_like(x, *p)).collect(),
        Op::MatMul => {
            let (a, ash) = ins[0];
            let (b, bsh) = ins[1];
            let (m, k, n) = (ash[0], ash[1], bsh[1]);
            let mut c = vec![0.0; m * n];
            if m > 0 && n > 0 && k > 0 {
                // SAFETY: buffers are sized m*k, k*n and m*n with row-major strides.
                unsafe {
                    matrixmultiply::dgemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        k as isize,
                        1,
                        b.as_ptr(),
                        n as isize,
                        1,
                        0.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
            c
        }
        Op::Reshape => ins[0].0.to_vec(),
        Op::Gather(plan) => {
            let src = ins[0].0;
            plan.idx
                .iter()
                .map(|&i| if i == HOLE { 0.0 } else { src[i as usize] })
                .collect()
        }
        Op::Scatter(plan) => {
            let src = ins[0].0;
            let mut out = vec![0.0; numel(out_shape)];
            for (&i, &v) in plan.idx.iter().zip(src) {
                if i != HOLE {
                    out[i as usize] += v;
                }
            }
            out
        }
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
enum PlanKey {
    Reduce(Vec<usize>, Vec<usize>),
    Permute(Vec<usize>, Vec<usize>),
    Im2col(Vec<usize>, usize, usize, usize, usize),
    Pool(Vec<usize>, usize),
    Embed(Vec<usize>, usize, usize, usize),
}

thread_local! {
    static PLANS: RefCell<HashMap<PlanKey, Arc<IndexPlan>>> = RefCell::new(HashMap::new());
}

fn cached_plan(key: PlanKey, build: impl FnOnce() -> IndexPlan) -> Arc<IndexPlan> {
    if let Some(p) = PLANS.with(|m| m.borrow().get(&key).cloned()) {
        return p;
    }
    let plan = Arc::new(build());
    PLANS.with(|m| {
        let mut m = m.borrow_mut();
        if m.len() > 4096 {
            m.clear();
        }
        m.insert(key, plan.clone());
    });
    plan
}

/// Maps every element of `shape` to its position after summing out `axes`.
fn reduce_plan(shape: &[usize], axes: &[usize]) -> (Arc<IndexPlan>, Vec<usize>) {
    let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let mut out_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let plan = cached_plan(PlanKey::Reduce(shape.to_vec(), axes.to_vec()), || {
        let in_strides = strides(shape);
        let kept_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
        let out_strides = strides(&kept_shape);
        let n = numel(shape);
        let mut idx = Vec::with_capacity(n);
        for lin in 0..n {
            let mut o = 0;
            for (j, &d) in kept.iter().enumerate() {
                let coord = (lin / in_strides[d]) % shape[d];
                o += coord * out_strides[j];
            }
            idx.push(o as u32);
        }
        IndexPlan {
            idx,
            dense_len: numel(&kept_shape).max(1),
        }
    });
    (plan, out_shape)
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != data.len() {
            return Err(TensorError::BadShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn from_slice(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.to_vec(), shape)
    }

    pub fn scalar(v: f64) -> Self {
        Self::full(&[1], v)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::new(vec![v; numel(shape)], shape).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same values, no tape binding.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// Records this value as a differentiable leaf on `tape`.
    pub fn leaf(&self, tape: &Tape) -> Tensor {
        let id = tape.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: self.data.clone(),
            shape: self.shape.clone(),
        });
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: Some(NodeRef {
                tape: tape.clone(),
                id,
            }),
        }
    }

    pub(crate) fn from_node(tape: &Tape, id: usize, node: &Node, tracked: bool) -> Tensor {
        Tensor {
            shape: node.shape.clone(),
            data: node.value.clone(),
            node: tracked.then(|| NodeRef {
                tape: tape.clone(),
                id,
            }),
        }
    }

    /// Runs `op` on `inputs`, recording a node when any input is tracked.
    fn apply(op: Op, inputs: &[&Tensor], shape: Vec<usize>, data: Option<Arc<Vec<f64>>>) -> Result<Tensor> {
        let data = match data {
            Some(d) => d,
            None => {
                let ins: Vec<(&[f64], &[usize])> = inputs
                    .iter()
                    .map(|t| (t.data.as_slice(), t.shape.as_slice()))
                    .collect();
                Arc::new(forward(&op, &ins, &shape))
            }
        };
        if checked_mode() && !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite(op.name()));
        }
        let mut tape: Option<&Tape> = None;
        for t in inputs {
            if let Some(n) = &t.node {
                match tape {
                    None => tape = Some(&n.tape),
                    Some(existing) if !existing.same(&n.tape) => return Err(TensorError::TapeMismatch),
                    _ => {}
                }
            }
        }
        let node = match tape {
            None => None,
            Some(tape) => {
                let ids = inputs
                    .iter()
                    .map(|t| match &t.node {
                        Some(n) => n.id,
                        None => tape.push(Node {
                            op: Op::Const,
                            inputs: vec![],
                            value: t.data.clone(),
                            shape: t.shape.clone(),
                        }),
                    })
                    .collect();
                let id = tape.push(Node {
                    op,
                    inputs: ids,
                    value: data.clone(),
                    shape: shape.clone(),
                });
                Some(NodeRef {
                    tape: tape.clone(),
                    id,
                })
            }
        };
        Ok(Tensor { shape, data, node })
    }

    fn binary_op(&self, other: &Tensor, op: Op) -> Result<Tensor> {
        let shape = if self.shape == other.shape || other.numel() == 1 {
            self.shape.clone()
        } else if self.numel() == 1 {
            other.shape.clone()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: op.name(),
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        };
        if checked_mode() && matches!(op, Op::Div) && other.data.iter().any(|&v| v == 0.0) {
            return Err(TensorError::Domain { op: "div" });
        }
        Self::apply(op, &[self, other], shape, None)
    }

    fn unary_op(&self, op: Op) -> Result<Tensor> {
        Self::apply(op, &[self], self.shape.clone(), None)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_op(other, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_op(other, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_op(other, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_op(other, Op::Div)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary_op(Op::Neg)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.unary_op(Op::Scale(c))
    }

    pub fn shift(&self, c: f64) -> Result<Tensor> {
        self.unary_op(Op::Shift(c))
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary_op(Op::Relu)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary_op(Op::Exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        if checked_mode() && self.data.iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain { op: "log" });
        }
        self.unary_op(Op::Log)
    }

    pub fn pow(&self, p: f64) -> Result<Tensor> {
        self.unary_op(Op::Pow(p))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Self::apply(Op::MatMul, &[self, other], vec![self.shape[0], other.shape[1]], None)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != self.numel() {
            return Err(TensorError::BadShape {
                shape: shape.to_vec(),
                len: self.numel(),
            });
        }
        Self::apply(Op::Reshape, &[self], shape.to_vec(), Some(self.data.clone()))
    }

    pub(crate) fn gather(&self, plan: Arc<IndexPlan>, shape: &[usize]) -> Result<Tensor> {
        debug_assert_eq!(plan.dense_len, self.numel());
        debug_assert_eq!(plan.idx.len(), numel(shape));
        Self::apply(Op::Gather(plan), &[self], shape.to_vec(), None)
    }

    pub(crate) fn scatter(&self, plan: Arc<IndexPlan>, shape: &[usize]) -> Result<Tensor> {
        debug_assert_eq!(plan.idx.len(), self.numel());
        debug_assert_eq!(plan.dense_len, numel(shape));
        Self::apply(Op::Scatter(plan), &[self], shape.to_vec(), None)
    }

    fn check_axes(&self, axes: &[usize]) -> Result<Vec<usize>> {
        let mut axes: Vec<usize> = if axes.is_empty() {
            (0..self.shape.len()).collect()
        } else {
            axes.to_vec()
        };
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= self.shape.len()) {
            return Err(TensorError::Invalid {
                op: "reduce",
                msg: format!("axes {axes:?} out of range for rank {}", self.shape.len()),
            });
        }
        Ok(axes)
    }

    /// Sums over `axes`, removing them. An empty axis list reduces over
    /// every axis and yields shape `[1]`.
    pub fn sum(&self, axes: &[usize]) -> Result<Tensor> {
        let axes = self.check_axes(axes)?;
        let (plan, out_shape) = reduce_plan(&self.shape, &axes);
        self.scatter(plan, &out_shape)
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Tensor> {
        let axes = self.check_axes(axes)?;
        let count: usize = axes.iter().map(|&a| self.shape[a]).product();
        self.sum(&axes)?.scale(1.0 / count as f64)
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        self.sum(&[])
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        self.mean(&[])
    }

    /// Inverse of [`Tensor::sum`]: replicates a reduced tensor back along
    /// `axes` of `full_shape`.
    pub fn expand(&self, full_shape: &[usize], axes: &[usize]) -> Result<Tensor> {
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        let (plan, reduced) = reduce_plan(full_shape, &axes);
        if numel(&reduced) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "expand",
                lhs: self.shape.clone(),
                rhs: full_shape.to_vec(),
            });
        }
        self.gather(plan, full_shape)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {rank}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let plan = cached_plan(PlanKey::Permute(self.shape.clone(), perm.to_vec()), || {
            let in_strides = strides(&self.shape);
            let out_strides = strides(&out_shape);
            let n = self.numel();
            let idx = (0..n)
                .map(|lin| {
                    let mut src = 0;
                    for (j, &p) in perm.iter().enumerate() {
                        let coord = (lin / out_strides[j]) % out_shape[j];
                        src += coord * in_strides[p];
                    }
                    src as u32
                })
                .collect();
            IndexPlan { idx, dense_len: n }
        });
        self.gather(plan, &out_shape)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected rank 2, got {:?}", self.shape),
            });
        }
        self.permute(&[1, 0])
    }

    /// Places this tensor at `offset` along `axis` inside a zero tensor of
    /// shape `out_shape`.
    fn embed(&self, out_shape: &[usize], axis: usize, offset: usize) -> Result<Tensor> {
        let plan = cached_plan(PlanKey::Embed(self.shape.clone(), out_shape[axis], axis, offset), || {
            let in_strides = strides(&self.shape);
            let out_strides = strides(out_shape);
            let idx = (0..self.numel())
                .map(|lin| {
                    let mut o = 0;
                    for d in 0..self.shape.len() {
                        let mut c = (lin / in_strides[d]) % self.shape[d];
                        if d == axis {
                            c += offset;
                        }
                        o += c * out_strides[d];
                    }
                    o as u32
                })
                .collect();
            IndexPlan {
                idx,
                dense_len: numel(out_shape),
            }
        });
        self.scatter(plan, out_shape)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let mut out_shape = first.shape.clone();
        if axis >= out_shape.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range"),
            });
        }
        out_shape[axis] = 0;
        for p in parts {
            let compatible = p.shape.len() == first.shape.len()
                && (0..p.shape.len()).all(|d| d == axis || p.shape[d] == first.shape[d]);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            out_shape[axis] += p.shape[axis];
        }
        let mut offset = 0;
        let mut acc: Option<Tensor> = None;
        for p in parts {
            let e = p.embed(&out_shape, axis, offset)?;
            offset += p.shape[axis];
            acc = Some(match acc {
                None => e,
                Some(a) => a.add(&e)?,
            });
        }
        Ok(acc.expect("non-empty"))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.shape.len() || len == 0 || start + len > self.shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("[{start}, {}) on axis {axis} of {:?}", start + len, self.shape),
            });
        }
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let plan = cached_plan(PlanKey::Embed(out_shape.clone(), self.shape[axis], axis, start), || {
            let in_strides = strides(&out_shape);
            let full_strides = strides(&self.shape);
            let idx = (0..numel(&out_shape))
                .map(|lin| {
                    let mut o = 0;
                    for d in 0..out_shape.len() {
                        let mut c = (lin / in_strides[d]) % out_shape[d];
                        if d == axis {
                            c += start;
                        }
                        o += c * full_strides[d];
                    }
                    o as u32
                })
                .collect();
            IndexPlan {
                idx,
                dense_len: self.numel(),
            }
        });
        self.gather(plan, &out_shape)
    }

    fn spatial_dims(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(TensorError::Invalid {
                op,
                msg: format!("expected B×C×H×W, got {:?}", self.shape),
            }),
        }
    }

    /// 2-D convolution (cross-correlation) via an im2col gather and a
    /// matrix product.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.spatial_dims("conv2d")?;
        let (o, wc, kh, kw) = weight.spatial_dims("conv2d")?;
        if wc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape.clone(),
                rhs: weight.shape.clone(),
            });
        }
        if stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {kh}×{kw} stride {stride} pad {pad} on {h}×{w}"),
            });
        }
        if let Some(bias) = bias {
            if bias.shape != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: bias.shape.clone(),
                    rhs: vec![o],
                });
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let rows = c * kh * kw;
        let cols_n = b * ho * wo;
        let plan = cached_plan(PlanKey::Im2col(self.shape.clone(), kh, kw, stride, pad), || {
            let mut idx = vec![HOLE; rows * cols_n];
            for ci in 0..c {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let row = (ci * kh + ki) * kw + kj;
                        for bi in 0..b {
                            for oi in 0..ho {
                                let y = (oi * stride + ki) as isize - pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for oj in 0..wo {
                                    let x = (oj * stride + kj) as isize - pad as isize;
                                    if x < 0 || x >= w as isize {
                                        continue;
                                    }
                                    let col = (bi * ho + oi) * wo + oj;
                                    idx[row * cols_n + col] = (((bi * c + ci) * h + y as usize) * w + x as usize) as u32;
                                }
                            }
                        }
                    }
                }
            }
            IndexPlan {
                idx,
                dense_len: b * c * h * w,
            }
        });
        let cols = self.gather(plan, &[rows, cols_n])?;
        let wm = weight.reshape(&[o, rows])?;
        let y = wm.matmul(&cols)?.reshape(&[o, b, ho, wo])?.permute(&[1, 0, 2, 3])?;
        match bias {
            None => Ok(y),
            Some(bias) => y.add(&bias.expand(&[b, o, ho, wo], &[0, 2, 3])?),
        }
    }

    fn pool_plan(big: &[usize], factor: usize) -> Arc<IndexPlan> {
        cached_plan(PlanKey::Pool(big.to_vec(), factor), || {
            let (b, c, h, w) = (big[0], big[1], big[2], big[3]);
            let (hs, ws) = (h / factor, w / factor);
            let mut idx = Vec::with_capacity(b * c * h * w);
            for bc in 0..b * c {
                for y in 0..h {
                    for x in 0..w {
                        idx.push((bc * hs * ws + (y / factor) * ws + x / factor) as u32);
                    }
                }
            }
            IndexPlan {
                idx,
                dense_len: b * c * hs * ws,
            }
        })
    }

    /// Average pooling with a `factor`×`factor` window and matching stride.
    pub fn avg_down(&self, factor: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.spatial_dims("avg_down")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(TensorError::Invalid {
                op: "avg_down",
                msg: format!("{h}×{w} not divisible by {factor}"),
            });
        }
        let plan = Self::pool_plan(&self.shape, factor);
        self.scatter(plan, &[b, c, h / factor, w / factor])?
            .scale(1.0 / (factor * factor) as f64)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn nearest_up(&self, factor: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.spatial_dims("nearest_up")?;
        if factor == 0 {
            return Err(TensorError::Invalid {
                op: "nearest_up",
                msg: "factor must be positive".into(),
            });
        }
        let big = [b, c, h * factor, w * factor];
        let plan = Self::pool_plan(&big, factor);
        self.gather(plan, &big)
    }

    /// Per (batch, channel) mean of `self` over the positions where `mask`
    /// is 1. Elements whose mask is empty get a zero row and `false` in the
    /// returned validity vector.
    pub fn masked_mean(&self, mask: &[f64], mask_shape: &[usize]) -> Result<(Tensor, Vec<bool>)> {
        let (b, c, h, w) = self.spatial_dims("masked_mean")?;
        if mask_shape != [b, h, w] || mask.len() != b * h * w {
            return Err(TensorError::ShapeMismatch {
                op: "masked_mean",
                lhs: self.shape.clone(),
                rhs: mask_shape.to_vec(),
            });
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(TensorError::Invalid {
                op: "masked_mean",
                msg: "mask values must be 0 or 1".into(),
            });
        }
        let hw = h * w;
        let mut full = Vec::with_capacity(b * c * hw);
        let mut inv = Vec::with_capacity(b * c);
        let mut valid = Vec::with_capacity(b);
        for bi in 0..b {
            let m = &mask[bi * hw..(bi + 1) * hw];
            let count: f64 = m.iter().sum();
            valid.push(count > 0.0);
            for _ in 0..c {
                full.extend_from_slice(m);
                inv.push(if count > 0.0 { 1.0 / count } else { 0.0 });
            }
        }
        let maskc = Tensor::new(full, &self.shape)?;
        let inv = Tensor::new(inv, &[b, c])?;
        let out = self.mul(&maskc)?.sum(&[2, 3])?.mul(&inv)?;
        Ok((out, valid))
    }

    /// Log-softmax along axis 1 of a B×C×… tensor.
    pub fn log_softmax_channels(&self) -> Result<Tensor> {
        if self.shape.len() < 2 {
            return Err(TensorError::Invalid {
                op: "log_softmax",
                msg: format!("rank {} < 2", self.shape.len()),
            });
        }
        let (b, c) = (self.shape[0], self.shape[1]);
        let inner: usize = self.shape[2..].iter().product();
        // The shift is treated as a constant; log-sum-exp is invariant to it.
        let mut maxes = vec![f64::NEG_INFINITY; b * inner];
        for bi in 0..b {
            for ci in 0..c {
                let row = &self.data[(bi * c + ci) * inner..(bi * c + ci + 1) * inner];
                for (m, &v) in maxes[bi * inner..(bi + 1) * inner].iter_mut().zip(row) {
                    *m = m.max(v);
                }
            }
        }
        let mut reduced_shape = vec![b];
        reduced_shape.extend_from_slice(&self.shape[2..]);
        let shift = Tensor::new(maxes, &reduced_shape)?.expand(&self.shape, &[1])?;
        let z = self.sub(&shift)?;
        let lse = z.exp()?.sum(&[1])?.log()?.expand(&self.shape, &[1])?;
        z.sub(&lse)
    }
}
