use crate::error::{AutodiffError, Result};
use crate::Real;

/// Dense row-major array, optionally carrying a gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
    requires_grad: bool,
    grad: Option<Vec<Real>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(AutodiffError::BadLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Trainable tensor. Its gradient accumulator appears on the first
    /// accumulation.
    pub fn param(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        let mut t = Self::new(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: Real) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    /// Adds `delta` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, delta: &[Real]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += *b;
        }
        Ok(())
    }

    pub(crate) fn grad_mut_and_data(&mut self) -> (Option<&mut Vec<Real>>, &mut Vec<Real>) {
        (self.grad.as_mut(), &mut self.data)
    }
}
