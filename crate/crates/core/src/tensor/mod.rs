//! Dense row-major arrays, a reverse-mode tape, AdamW and seeded randomness.
//!
//! Everything is generic over [`Scalar`] so the same model code can be
//! replayed in 64-bit precision when checking gradients against finite
//! differences. Training itself runs in 32-bit.

mod embed;
mod optim;
mod rng;
mod tape;

use std::fmt::Debug;
use std::sync::Arc;

pub use embed::{sinusoidal_embedding, sinusoidal_embedding_with_period, DEFAULT_MAX_PERIOD};
pub use optim::{AdamW, AdamWConfig, OptimizerState};
pub use rng::RngState;
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Floating-point element type usable on a [`Tape`].
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + Default + Debug + Send + Sync + 'static
{
    /// `c = a · b` for logical `a: [m, k]`, `b: [k, n]`, written row-major
    /// into `c`. A `_t` flag means that operand is stored transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self]);

    fn from_f64_lossy(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("float conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("float conversion")
    }
}

// Strides for matrixmultiply: (row stride, col stride) in elements.
fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[$t], a_t: bool, b: &[$t], b_t: bool, c: &mut [$t]) {
                debug_assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                // SAFETY: slice lengths are checked by every caller against m, k, n.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        0.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// An immutable dense array. Cloning shares the underlying buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Arc<[F]>,
}

impl<F: Scalar> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("tensor shape {shape:?} must be non-empty and positive")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self {
            shape,
            data: data.into(),
        })
    }

    /// Builds a tensor whose length is known to match; used internally where
    /// the shape arithmetic has already been checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<[F]>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![F::zero(); n].into())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n].into())
    }

    pub fn scalar(value: F) -> Self {
        Self::from_parts(vec![1], vec![value].into())
    }

    /// Builds a `[rows.len(), width]` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let width = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::contract("rows of unequal length"));
        }
        Self::new(vec![rows.len(), width], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> &Arc<[F]> {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.data.to_vec()
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self::from_parts(shape, self.data.clone()))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.rows() {
            return Err(Error::contract(format!(
                "row slice {start}..{} out of range for {:?}",
                start + len,
                self.shape
            )));
        }
        let w = self.cols();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self::from_parts(shape, self.data[start * w..(start + len) * w].into()))
    }

    /// Stacks 2-D tensors of equal width along rows.
    pub fn concat_rows(parts: &[&Tensor<F>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let w = first.cols();
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        let mut rows = 0;
        for p in parts {
            if p.cols() != w {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(p.data());
        }
        Ok(Self::from_parts(vec![rows, w], data.into()))
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum_sq(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &v| acc + v * v)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| G::from_f64_lossy(v.to_f64_lossy())).collect(),
        )
    }
}
