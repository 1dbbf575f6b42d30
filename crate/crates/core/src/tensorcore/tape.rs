//! Append-only operation tape.
//!
//! Every operation on a tracked [`Tensor`](super::Tensor) appends a node that
//! records the op kind, the ids of its inputs and its output value. Node
//! inputs always reference strictly earlier ids, so the tape is acyclic by
//! construction and can be replayed front to back.
//!
//! Backward passes are themselves built from ordinary tensor operations, so
//! a gradient computed with `create_graph = true` lands on the same tape and
//! can be differentiated again.

use std::cell::Cell;
use std::sync::Arc;

use parking_lot::Mutex;

use super::error::{Result, TensorError};

/// Sentinel in an [`IndexPlan`] for a position that reads as zero.
pub(crate) const HOLE: u32 = u32::MAX;

/// A linear index map between a dense buffer of `dense_len` elements and a
/// gathered buffer of `idx.len()` elements.
///
/// Gathering reads `dense[idx[i]]` into slot `i`; scattering adds slot `i`
/// into `dense[idx[i]]`. The two are adjoint to each other.
#[derive(Debug)]
pub(crate) struct IndexPlan {
    pub idx: Vec<u32>,
    pub dense_len: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Shift(f64),
    Relu,
    Exp,
    Log,
    Pow(f64),
    MatMul,
    Reshape,
    Gather(Arc<IndexPlan>),
    Scatter(Arc<IndexPlan>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Shift(_) => "shift",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Pow(_) => "pow",
            Op::MatMul => "matmul",
            Op::Reshape => "reshape",
            Op::Gather(_) => "gather",
            Op::Scatter(_) => "scatter",
        }
    }
}

#[derive(Clone)]
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<usize>,
    pub value: Arc<Vec<f64>>,
    pub shape: Vec<usize>,
}

#[derive(Default)]
pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
    /// Nodes with id below this bound were consumed by a non-retaining
    /// backward pass.
    pub released_below: usize,
}

/// Shared handle to a computation tape.
///
/// Cloning the handle does not copy the tape. A tape may move between
/// threads but is only ever driven from one at a time.
#[derive(Clone, Default)]
pub struct Tape {
    pub(crate) inner: Arc<Mutex<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same(&self, other: &Tape) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn push(&self, node: Node) -> usize {
        let mut inner = self.inner.lock();
        debug_assert!(node.inputs.iter().all(|&i| i < inner.nodes.len()));
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    pub(crate) fn node(&self, id: usize) -> Node {
        self.inner.lock().nodes[id].clone()
    }

    pub(crate) fn release_below(&self, bound: usize) {
        let mut inner = self.inner.lock();
        inner.released_below = inner.released_below.max(bound);
    }

    pub(crate) fn check_live(&self, id: usize) -> Result<()> {
        if id < self.inner.lock().released_below {
            Err(TensorError::GraphReleased)
        } else {
            Ok(())
        }
    }

    /// Re-evaluates every recorded op from its inputs' stored values and
    /// returns the ids of nodes whose recomputed value differs in any bit.
    pub fn replay_mismatches(&self) -> Vec<usize> {
        let nodes = self.inner.lock().nodes.clone();
        let mut bad = Vec::new();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf | Op::Const) {
                continue;
            }
            let ins: Vec<(&[f64], &[usize])> = node
                .inputs
                .iter()
                .map(|&i| (nodes[i].value.as_slice(), nodes[i].shape.as_slice()))
                .collect();
            let out = super::tensor::forward(&node.op, &ins, &node.shape);
            let same = out.len() == node.value.len()
                && out
                    .iter()
                    .zip(node.value.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                bad.push(id);
            }
        }
        bad
    }
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

thread_local! {
    static CHECKED: Cell<bool> = const { Cell::new(false) };
    static KINKS: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Folds the sign pattern of every relu input evaluated on this thread into
/// a running hash while a [`KinkProbe`] is live. Two evaluations with equal
/// hashes lie (up to hash collisions) on the same smooth piece.
pub(crate) fn record_relu_signs(xs: &[f64]) {
    KINKS.with(|k| {
        if let Some(mut h) = k.get() {
            for chunk in xs.chunks(64) {
                let mut word = chunk.len() as u64;
                for (i, &x) in chunk.iter().enumerate() {
                    if x > 0.0 {
                        word ^= 1 << i;
                    }
                }
                h = (h ^ word).wrapping_mul(0x100_0000_01b3).rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15;
            }
            k.set(Some(h));
        }
    })
}

/// Records relu sign patterns on this thread until dropped.
pub struct KinkProbe {
    prev: Option<u64>,
}

impl KinkProbe {
    pub fn start() -> Self {
        let prev = KINKS.with(|k| k.replace(Some(0xcbf2_9ce4_8422_2325)));
        Self { prev }
    }

    /// Hash of every sign recorded since `start`.
    pub fn pattern(&self) -> u64 {
        KINKS.with(|k| k.get()).expect("probe is live")
    }
}

impl Drop for KinkProbe {
    fn drop(&mut self) {
        KINKS.with(|k| k.set(self.prev));
    }
}

/// Whether ops on this thread reject non-finite results and out-of-domain
/// operands for `log` and `div`.
pub fn checked_mode() -> bool {
    CHECKED.with(|c| c.get())
}

/// Enables checked mode on this thread until the guard drops.
pub struct CheckedGuard {
    prev: bool,
}

impl CheckedGuard {
    pub fn enable() -> Self {
        let prev = CHECKED.with(|c| c.replace(true));
        Self { prev }
    }
}

impl Drop for CheckedGuard {
    fn drop(&mut self) {
        CHECKED.with(|c| c.set(self.prev));
    }
}
