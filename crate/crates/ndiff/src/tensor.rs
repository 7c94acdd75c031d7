//! Tensor storage and the raw (non-recorded) kernels the tape ops build on.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::Float;

/// Element types the tape can differentiate through.
///
/// `f32` is the working type for training; `f64` exists so gradient tests can
/// run at finite-difference-friendly precision.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor of rank ≤ 4.
///
/// Data is shared on clone; tensors are treated as immutable once built and
/// mutation (e.g. an optimizer update) goes through [`Tensor::data_mut`],
/// which copies only if the buffer is still shared.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    dims: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Self {
        assert!(dims.len() <= 4, "rank {} exceeds maximum of 4", dims.len());
        let len: usize = dims.iter().product();
        assert_eq!(
            len,
            data.len(),
            "shape {:?} needs {} elements, got {}",
            dims,
            len,
            data.len()
        );
        Tensor {
            dims: dims.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let len: usize = dims.iter().product();
        Self::from_vec(dims, vec![value; len])
    }

    /// Rank-1 tensor holding a single value; the tape's scalar convention.
    pub fn scalar(value: T) -> Self {
        Self::from_vec(&[1], vec![value])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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
        let owned: &mut Vec<T> = Arc::make_mut(&mut self.data);
        owned.as_mut_slice()
    }

    /// The single element of a scalar-convention tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.dims);
        self.data[0]
    }

    pub fn reshaped(&self, dims: &[usize]) -> Self {
        let len: usize = dims.iter().product();
        assert_eq!(len, self.len(), "reshape {:?} -> {:?}", self.dims, dims);
        Tensor {
            dims: dims.to_vec(),
            data: Arc::clone(&self.data),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data = self.data.iter().map(|&x| f(x)).collect();
        Tensor {
            dims: self.dims.clone(),
            data: Arc::new(data),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|x| !x.is_finite())
    }

    /// Lossy element-type conversion, used to lift `f32` states into `f64`
    /// for gradient tests.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect();
        Tensor {
            dims: self.dims.clone(),
            data: Arc::new(data),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.len() <= 8 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{:?}, {:?}, ...]", self.data[0], self.data[1])
        }
    }
}

// ---------------------------------------------------------------------------
// Raw kernels.  These operate on slices, never allocate behind the caller's
// back, and fix the accumulation order (the inner `k` loop always runs in
// index order) so results are reproducible bit-for-bit.
// ---------------------------------------------------------------------------

/// C[m,n] += A[m,k] · B[k,n], accumulated in `k` order.
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// C[m,n] += A[m,k] · B[n,k]ᵀ (row-by-row dot products).
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, c_ij) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *c_ij += acc;
        }
    }
}

/// C[m,n] += A[k,m]ᵀ · B[k,n], used by matmul backward.
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    }
}

/// Numerically stable softmax over the last dimension, in place.
pub(crate) fn softmax_rows<T: Scalar>(row_len: usize, data: &mut [T]) {
    debug_assert!(row_len > 0 && data.len() % row_len == 0);
    for row in data.chunks_mut(row_len) {
        let mut max = row[0];
        for &x in row.iter() {
            if x > max {
                max = x;
            }
        }
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

pub(crate) const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608028654;
pub(crate) const GELU_CUBIC: f64 = 0.044715;

pub(crate) fn gelu_value<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}
