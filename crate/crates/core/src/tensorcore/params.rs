use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::autograd::{grad, GradOptions, Grads};
use super::error::{Result, TensorError};
use super::tape::Tape;
use super::tensor::Tensor;

/// Which part of the model a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    /// Feature extractor weights.
    Extractor,
    /// Live segmentation-head weights.
    Head,
    /// Meta-learned head initialization.
    HeadInit,
    /// Optimizer state or anything else.
    Aux,
}

impl ParamRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamRole::Extractor => "extractor",
            ParamRole::Head => "head",
            ParamRole::HeadInit => "head-init",
            ParamRole::Aux => "aux",
        }
    }
}

/// Ordered, uniquely named collection of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    role: ParamRole,
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new(role: ParamRole) -> Self {
        Self {
            role,
            entries: IndexMap::new(),
        }
    }

    pub fn role(&self) -> ParamRole {
        self.role
    }

    pub fn with_role(mut self, role: ParamRole) -> Self {
        self.role = role;
        self
    }

    /// Adds a new entry. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::Invalid {
                op: "ParamSet::insert",
                msg: format!("duplicate parameter `{name}`"),
            });
        }
        self.entries.insert(name, t);
        Ok(())
    }

    /// Replaces the value of an existing entry; the shape may not change.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if slot.shape() != t.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamSet::set",
                lhs: slot.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        *slot = t;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.entries.values().collect()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Copies every entry onto `tape` as a differentiable leaf.
    pub fn attach(&self, tape: &Tape) -> ParamSet {
        self.map(|_, t| t.detach().leaf(tape))
    }

    pub fn detach(&self) -> ParamSet {
        self.map(|_, t| t.detach())
    }

    pub fn map(&self, mut f: impl FnMut(&str, &Tensor) -> Tensor) -> ParamSet {
        ParamSet {
            role: self.role,
            entries: self.entries.iter().map(|(k, v)| (k.clone(), f(k, v))).collect(),
        }
    }

    pub fn try_map(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<ParamSet> {
        let mut entries = IndexMap::with_capacity(self.entries.len());
        for (k, v) in &self.entries {
            entries.insert(k.clone(), f(k, v)?);
        }
        Ok(ParamSet {
            role: self.role,
            entries,
        })
    }

    /// Same names and shapes, all zeros, detached.
    pub fn zeros_like(&self) -> ParamSet {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }

    /// Builds a set with the same names as `self` from per-entry tensors.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<ParamSet> {
        if values.len() != self.entries.len() {
            return Err(TensorError::Invalid {
                op: "ParamSet::with_values",
                msg: format!("{} values for {} entries", values.len(), self.entries.len()),
            });
        }
        let mut out = self.clone();
        for ((_, slot), v) in out.entries.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "ParamSet::with_values",
                    lhs: slot.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            *slot = v;
        }
        Ok(out)
    }

    /// Concatenated values in entry order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.numel());
        for t in self.entries.values() {
            v.extend_from_slice(t.data());
        }
        v
    }

    /// Inverse of [`ParamSet::flatten`], producing detached tensors.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.numel() {
            return Err(TensorError::BadShape {
                shape: vec![self.numel()],
                len: flat.len(),
            });
        }
        let mut off = 0;
        self.try_map(|_, t| {
            let n = t.numel();
            let out = Tensor::from_slice(&flat[off..off + n], t.shape());
            off += n;
            out
        })
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Gradient of `loss` with respect to every entry. Entries must be leaves
    /// (or intermediates) on the loss's tape.
    pub fn grad(&self, loss: &Tensor, opts: GradOptions) -> Result<(ParamSet, Vec<bool>)> {
        let wrt = self.tensors();
        let Grads { grads, reachable } = grad(loss, &wrt, opts)?;
        Ok((self.with_values(grads)?, reachable))
    }

    /// Bitwise equality of values, entry by entry.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(other.entries.iter()).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
