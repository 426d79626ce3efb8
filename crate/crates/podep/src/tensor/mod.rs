//! Dense tensors with recorded reverse-mode differentiation.
//!
//! [`Tensor`] is a contiguous row-major array of rank 0..=2 (scalars are shape
//! `[1]`). [`Tape`] records every operation of a forward pass so
//! [`Tape::backward`] can replay it in reverse and hand out gradients for the
//! leaves. [`check::finite_diff_check`] verifies those gradients against
//! central differences and is the oracle every network module is tested with.

mod tape;

pub mod check;
pub mod init;

pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

use crate::Scalar;

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {details}")]
    Invalid { op: &'static str, details: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err(op: &'static str, details: String) -> TensorError {
    TensorError::ShapeMismatch { op, details }
}

/// Dense row-major array of floating-point values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(shape_err(
                "from_vec",
                format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at2(&self, row: usize, col: usize) -> T {
        self.data[row * self.shape[1] + col]
    }

    #[inline]
    pub fn set2(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.shape[1] + col] = value;
    }

    pub fn row_slice(&self, row: usize) -> &[T] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += alpha * other`; shapes must match.
    pub fn add_scaled_assign(&mut self, other: &Tensor<T>, alpha: T) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        self.add_scaled_assign(other, T::one());
    }

    /// Squared Euclidean norm of all entries.
    pub fn sq_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.rows() {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == T::zero() {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product `self ([r,c]) . x ([c]) -> [r]`.
    pub fn matvec(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || x.rank() != 1 || self.cols() != x.len() {
            return Err(shape_err(
                "matvec",
                format!("{:?} x {:?}", self.shape, x.shape),
            ));
        }
        let out: Vec<T> = self
            .data
            .chunks_exact(self.cols())
            .map(|row| {
                row.iter()
                    .zip(x.data.iter())
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect();
        Ok(Tensor::vector(out))
    }

    /// Vector-matrix product `x ([n]) . self ([n,d]) -> [d]`.
    pub fn vecmat(x: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 1 || m.rank() != 2 || x.len() != m.rows() {
            return Err(shape_err(
                "vecmat",
                format!("{:?} x {:?}", x.shape, m.shape),
            ));
        }
        let (n, d) = (m.rows(), m.cols());
        let mut out = vec![T::zero(); d];
        for i in 0..n {
            let xi = x.data[i];
            if xi == T::zero() {
                continue;
            }
            let row = &m.data[i * d..(i + 1) * d];
            for (o, &v) in out.iter_mut().zip(row.iter()) {
                *o += xi * v;
            }
        }
        Ok(Tensor::vector(out))
    }

    pub fn transpose(&self) -> Tensor<T> {
        debug_assert_eq!(self.rank(), 2);
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// Outer product of two vectors: `a ([r]) . b ([c]) -> [r,c]`.
    pub fn outer(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(a.rank(), 1);
        debug_assert_eq!(b.rank(), 1);
        let (r, c) = (a.len(), b.len());
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let ai = a.data[i];
            for j in 0..c {
                out.data[i * c + j] = ai * b.data[j];
            }
        }
        out
    }
}
