//! Dense row-major tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tensor`] is plain storage: shape, data and an optional gradient slot.
//! Computation happens on a [`Tape`], which records every operation applied to
//! its [`Var`] handles and replays them backwards in [`Tape::backward`].
//! The tape is rebuilt on every forward pass.

mod gradcheck;
mod kernels;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckReport, GRAD_FLOOR};
pub use kernels::{matmul_into, MatLayout};
pub use tape::{Gradients, Tape, Var};

/// Floating point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c = a * b + beta * c` on strided matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_layout: MatLayout,
        b: &[Self],
        b_layout: MatLayout,
        beta: Self,
        c: &mut [Self],
        c_layout: MatLayout,
    );

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite element")
    }
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_layout: MatLayout,
        b: &[f32],
        b_layout: MatLayout,
        beta: f32,
        c: &mut [f32],
        c_layout: MatLayout,
    ) {
        kernels::check_extent(m, k, a.len(), a_layout);
        kernels::check_extent(k, n, b.len(), b_layout);
        kernels::check_extent(m, n, c.len(), c_layout);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: extents of all three operands were checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_layout.row,
                a_layout.col,
                b.as_ptr(),
                b_layout.row,
                b_layout.col,
                beta,
                c.as_mut_ptr(),
                c_layout.row,
                c_layout.col,
            );
        }
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_layout: MatLayout,
        b: &[f64],
        b_layout: MatLayout,
        beta: f64,
        c: &mut [f64],
        c_layout: MatLayout,
    ) {
        kernels::check_extent(m, k, a.len(), a_layout);
        kernels::check_extent(k, n, b.len(), b_layout);
        kernels::check_extent(m, n, c.len(), c_layout);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: extents of all three operands were checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_layout.row,
                a_layout.col,
                b.as_ptr(),
                b_layout.row,
                b_layout.col,
                beta,
                c.as_mut_ptr(),
                c_layout.row,
                c_layout.col,
            );
        }
    }
}

/// Dense n-dimensional array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&s| s == 0) {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|&x| T::lit(x))).collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        assert_eq!(g.len(), self.data.len(), "gradient length");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn scale_grad(&mut self, c: T) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = *x * c);
        }
    }

    /// Mutable values alongside the gradient, for in-place optimizer updates.
    pub fn values_and_grad(&mut self) -> (&mut [T], Option<&[T]>) {
        (&mut self.data, self.grad.as_deref())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a rank-2 view whose last axis is the row length.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().expect("non-scalar");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts element type; `f64 -> f32` rounds to nearest.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of the data arrays.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}
