//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! Values live in row-major order (last axis fastest). Every differentiable
//! operation is a method on [`Tape`] that records its inputs and whatever it
//! needs for the backward pass; [`Tape::backward`] then walks the nodes in
//! reverse insertion order, which is a valid reverse topological order since
//! a node can only reference nodes created before it.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::finite_difference_check;
pub use tape::{
    Combine, PoolKind, RunningStats, Tape, Unary, Var, BN_EPS, BN_MOMENTUM, SQRT_EPS,
};

use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: &[f64], requires_grad: bool) -> Result<Self> {
        Self::from_vec(shape, values.to_vec(), requires_grad)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == data.len(),
            "shape {:?} holds {} elements but {} values were given",
            shape,
            numel,
            data.len()
        );
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(numel == self.data.len(), "cannot reshape {:?} into {:?}", self.shape, shape);
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_copies_values() {
        let t = Tensor::new(&[2, 2], &[1.0, 2.0, 3.0, 4.0], false).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(t.grad.is_none());
    }

    #[test]
    fn create_empty() {
        let t = Tensor::new(&[0], &[], false).unwrap();
        assert_eq!(t.numel(), 0);
    }

    #[test]
    fn create_rejects_length_mismatch() {
        assert!(Tensor::new(&[2], &[1.0, 2.0, 3.0], false).is_err());
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert!(strides(&[]).is_empty());
    }
}
