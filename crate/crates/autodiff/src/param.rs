//! Learnable tensors and their gradient slots.

use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// A named learnable tensor with a gradient accumulator of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Handle to a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of a model's parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<ParamTensor>,
    by_name: BTreeMap<String, usize>,
}

/// Tape leaves for every parameter of a [`ParamSet`], in insertion order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn opt(&self, id: Option<ParamId>) -> Option<Var> {
        id.map(|id| self.vars[id.0])
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(AutodiffError::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(ParamTensor::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Record every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect(),
        }
    }

    /// Record every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        }
    }

    /// Add `scale * d(root)/d(param)` into every gradient slot.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients, scale: f64) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*v) {
                for (acc, gv) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += scale * gv;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(ParamTensor::zero_grad);
    }

    /// Replace values from another set with identical names and shapes.
    pub fn load_values(&mut self, other: &ParamSet) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(AutodiffError::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            if p.name != q.name || p.value.shape() != q.value.shape() {
                return Err(AutodiffError::InvalidArgument(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    p.name,
                    p.value.shape(),
                    q.name,
                    q.value.shape()
                )));
            }
            p.value = q.value.clone();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}
