//! Dense row-major tensors.
//!
//! Training runs in `f32`. The same kernels are instantiated at `f64` for
//! gradient checking, where single precision cannot resolve a central
//! difference to the required tolerance.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type of a [`Tensor`].
pub trait Real: Float + Debug + Default + Sum + Send + Sync + 'static {
    fn from_f64_lossy(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[inline]
pub(crate) fn c<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, checking that `values` fills `dims` exactly.
    ///
    /// A zero extent is accepted so that empty selections (for example zero
    /// masked positions) have a well-formed `0 x n` result.
    pub fn new(dims: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::contract("tensor dims must be non-empty"));
        }
        let numel: usize = dims.iter().product();
        if numel != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: dims,
                right: vec![values.len()],
            });
        }
        Ok(Self {
            dims,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Self::new(dims.to_vec(), vec![T::zero(); numel]).expect("dims match")
    }

    pub fn filled(dims: &[usize], value: T) -> Self {
        let numel = dims.iter().product();
        Self::new(dims.to_vec(), vec![value; numel]).expect("dims match")
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![1], vec![value]).expect("dims match")
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], values)
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                left: self.dims.clone(),
                right: vec![delta.len()],
            });
        }
        let grad = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.dims.len());
        let mut flat = 0;
        for (i, d) in index.iter().zip(&self.dims) {
            debug_assert!(i < d);
            flat = flat * d + i;
        }
        self.values[flat]
    }

    /// Converts to another element type. Gradients are dropped.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            values: self.values.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.is_empty() || numel != self.values.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.dims,
                right: dims,
            });
        }
        self.dims = dims;
        Ok(self)
    }
}
