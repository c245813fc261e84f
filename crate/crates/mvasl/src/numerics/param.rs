//! Named trainable parameters and their accumulated gradients.

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Result, Tensor};

/// A trainable tensor with its gradient buffer. The gradient always has the
/// value's shape and is zeroed at the start of each optimization step.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter { name: name.into(), value, grad }
    }
}

/// Ordered registry of parameters. Order is fixed at construction and drives
/// checkpoint layout, optimizer state alignment, and gradient accumulation.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn set_value(&mut self, idx: usize, value: Tensor) {
        debug_assert_eq!(value.shape(), self.params[idx].value.shape());
        self.params[idx].value = value;
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_values(&mut self, values: &[Tensor]) {
        assert_eq!(values.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(values) {
            debug_assert_eq!(p.value.shape(), v.shape());
            p.value = v.clone();
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape().to_vec());
        }
    }

    /// Record every parameter value as a leaf on `tape`, in registry order.
    pub fn leaf_all<'t>(&self, tape: &'t Tape) -> Result<Vec<Var<'t>>> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Add a backward pass's gradients into the parameter gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients, vars: &[Var<'_>]) -> Result<()> {
        assert_eq!(vars.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.wrt(*v) {
                p.grad = p.grad.add(g)?;
            }
        }
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
