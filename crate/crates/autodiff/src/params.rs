use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Ordered table of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Tape handles for every entry of a [`ParamSet`], in insertion order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends or replaces `name`; returns its slot.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
            return i;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slot(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slot(name).map(move |i| &mut self.tensors[i])
    }

    pub fn at(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every tensor on the tape as a leaf (trainable) or constant.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.tensor(t)).collect(),
        }
    }

    /// Adds the gradients of a backward pass into the accumulators.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            if !t.requires_grad() {
                continue;
            }
            if let Some(g) = grads.get(*v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn set_trainable(&mut self, on: bool) {
        for t in &mut self.tensors {
            t.set_requires_grad(on);
        }
    }

    /// Copies values from `other` for every shared name, checking shapes.
    pub fn load_values(&mut self, other: &ParamSet) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .get(name)
                .ok_or_else(|| AutodiffError::UnknownParam(name.clone()))?;
            let dst = &mut self.tensors[i];
            if src.shape() != dst.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "load_values",
                    lhs: dst.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
