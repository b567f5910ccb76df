//! Dense tensors and the fixed kernel set the autoencoder is built from.
//!
//! Layout is row-major `B x C x H x W` with width fastest. Training and
//! inference run in `f32`; every kernel is generic over [`Element`] so the
//! gradient checker can instantiate the same code at `f64`.

use crate::error::{Error, Result};
use crate::rng::RngState;

mod batchnorm;
mod conv;
pub mod gradcheck;
mod ops;
mod optim;

pub use batchnorm::{BatchNorm2d, BnMode};
pub use conv::{conv2d, conv2d_backward, Conv2d, ConvGrads};
pub use ops::{
    add, add_backward, mse_loss, mse_loss_backward, relu, relu_backward, upsample_nearest2x,
    upsample_nearest2x_backward,
};
pub use optim::{Adam, Optimizer, OptimizerKind, Sgd};

/// Scalar element type for tensors: `f32` for real work, `f64` inside the
/// gradient checker.
pub trait Element:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    /// Row-major `C = alpha * A(m x k) · B(k x n) + beta * C(m x n)`.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);

    fn from_f64c(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite f64 converts")
    }

    fn to_f64c(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("element converts to f64")
    }
}

impl Element for f32 {
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // Safety: dimensions checked above; strides describe contiguous row-major buffers.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Element for f64 {
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // Safety: as above.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

/// Dense row-major tensor with an optional same-shape gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor, rejecting data whose length does not match the shape.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} elements, got {}", shape, expect, data.len()),
            ));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); len], grad: None }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor { shape, data: vec![value; len], grad: None }
    }

    /// Fills from a function of the flat row-major index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor { shape, data: (0..len).map(&mut f).collect(), grad: None }
    }

    /// Uniform draws in `[lo, hi)`; consumes one draw per element in index order.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut RngState) -> Self {
        Self::from_fn(shape, |_| T::from_f64c(lo + rng.unit_f64() * (hi - lo)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Interprets the shape as `B x C x H x W`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape("tensor", format!("expected rank 4, got shape {:?}", self.shape))),
        }
    }

    /// Reinterprets the same data under a new shape of equal total length;
    /// no copy.
    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("shape {:?} has {} elements, tensor holds {}", shape, n, self.data.len()),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Allocates the gradient buffer (zeroed) if absent.
    pub fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Adds `delta` into the gradient buffer, allocating it when absent.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient length {} vs tensor length {}", delta.len(), self.data.len()),
            ));
        }
        self.ensure_grad();
        let g = self.grad.as_mut().expect("just ensured");
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(T::zero());
        }
    }

    /// Element-wise cast; drops any gradient buffer.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64c(v.to_f64c())).collect(),
            grad: None,
        }
    }
}

/// A named trainable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone)]
pub struct Parameter<T: Element = f32> {
    name: String,
    value: Tensor<T>,
    moment1: Vec<T>,
    moment2: Vec<T>,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, mut value: Tensor<T>) -> Self {
        value.ensure_grad();
        let len = value.len();
        Parameter {
            name: name.into(),
            value,
            moment1: vec![T::zero(); len],
            moment2: vec![T::zero(); len],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    /// Mutable access to the value tensor; shape must not be changed.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn grad(&self) -> &[T] {
        self.value.grad().expect("parameters always carry a gradient buffer")
    }

    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        self.value.accumulate_grad(delta)
    }

    pub fn zero_grad(&mut self) {
        self.value.zero_grad();
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Value, gradient and both moment buffers, borrowed together for the
    /// optimizer update.
    pub(crate) fn update_views(&mut self) -> (&mut [T], &[T], &mut [T], &mut [T]) {
        let Parameter { value, moment1, moment2, .. } = self;
        let (data, grad) = value.data_and_grad_mut();
        (data, grad, moment1, moment2)
    }

    pub fn cast<U: Element>(&self) -> Parameter<U> {
        Parameter::new(self.name.clone(), self.value.cast())
    }
}

impl<T: Element> Tensor<T> {
    /// Simultaneous mutable data view and immutable grad view (optimizer use).
    pub(crate) fn data_and_grad_mut(&mut self) -> (&mut [T], &[T]) {
        let Tensor { data, grad, .. } = self;
        (data.as_mut_slice(), grad.as_deref().expect("gradient buffer present"))
    }
}
