//! Dense N-dimensional arrays and a tape-based reverse-mode differentiation graph.
//!
//! [`Tensor`] is a plain value type (shape plus contiguous row-major buffer).
//! Differentiable computation happens on a [`Graph`]: leaves are registered
//! with [`Graph::leaf`], every operation appends a node, and
//! [`Graph::backward`] sweeps the tape in reverse creation order, which is a
//! valid topological order by construction.
//!
//! The element type is generic over [`Scalar`] so that training runs at `f32`
//! while gradient checks run the exact same code at `f64`.

mod gradcheck;
mod graph;
mod kernels;

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GRAD_EPS};
pub use graph::{Graph, Pointwise, Var};
pub use kernels::{conv_out_extent, resize3, upsample_weights};

/// Element type of a tensor.
pub trait Scalar: Float + Debug + Default + Send + Sync + std::iter::Sum + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// Strided `c = a * b + beta * c` (`c` has unit column stride).
    ///
    /// # Safety
    /// All addressed elements must be in bounds and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    #[doc(hidden)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        a_s: (usize, usize),
        b: *const Self,
        b_s: (usize, usize),
        beta: Self,
        c: *mut Self,
        rsc: usize,
    );
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        a_s: (usize, usize),
        b: *const Self,
        b_s: (usize, usize),
        beta: Self,
        c: *mut Self,
        rsc: usize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, a_s.0 as isize, a_s.1 as isize, b, b_s.0 as isize, b_s.1 as isize, beta, c, rsc as isize, 1)
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        a_s: (usize, usize),
        b: *const Self,
        b_s: (usize, usize),
        beta: Self,
        c: *mut Self,
        rsc: usize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, a_s.0 as isize, a_s.1 as isize, b, b_s.0 as isize, b_s.1 as isize, beta, c, rsc as isize, 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", format!("shape {:?} needs {} elements, got {}", shape, n, data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Same buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a.f64() - b.f64()).abs()).fold(0.0, f64::max)
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }
}
