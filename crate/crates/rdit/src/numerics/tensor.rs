//! Dense row-major tensors with deterministic CPU kernels.
//!
//! All reductions run in a fixed left-to-right order, so identical inputs
//! produce bit-identical outputs on a given machine. Parallel kernels only
//! split work across disjoint output elements; the per-element accumulation
//! order never changes with the thread count.

use std::fmt;

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Scalar element type for tensors: `f32` for training, `f64` for
/// verification (gradient checks).
pub trait Element: Float + fmt::Debug + fmt::Display + Send + Sync + 'static {}

impl Element for f32 {}
impl Element for f64 {}

/// Lossy cast from `f64` into the element type.
#[inline]
pub fn cast<E: Element>(x: f64) -> E {
    E::from(x).expect("f64 -> element cast")
}

/// Minimum number of multiply-accumulates before a kernel goes parallel.
const PAR_MACS: usize = 1 << 16;

#[derive(Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![E::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// I.i.d. normal entries with the given standard deviation. Values are
    /// drawn in `f64` and cast, so the stream is identical across precisions.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| cast::<E>(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?}",
            self.shape,
            shape
        );
        self.shape = shape;
        self
    }

    /// Number of rows when viewing the tensor as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        let d = self.last_dim();
        if d == 0 { 0 } else { self.data.len() / d }
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: E) -> Self {
        self.map(|x| x * s)
    }

    /// `self += other * s`, elementwise.
    pub fn axpy(&mut self, s: E, other: &Self) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + s * b;
        }
    }

    pub fn sum(&self) -> E {
        let mut acc = E::zero();
        for &x in &self.data {
            acc = acc + x;
        }
        acc
    }

    pub fn mean(&self) -> E {
        self.sum() / cast(self.data.len() as f64)
    }

    pub fn sum_sq(&self) -> E {
        let mut acc = E::zero();
        for &x in &self.data {
            acc = acc + x * x;
        }
        acc
    }

    pub fn l2_norm(&self) -> E {
        self.sum_sq().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> E {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        let mut m = E::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let d = (a - b).abs();
            if d > m {
                m = d;
            }
        }
        m
    }

    /// Cast every element through `f64` into another element type.
    pub fn cast_to<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| cast::<F>(x.to_f64().expect("finite")))
                .collect(),
        }
    }
}

/// `[rows, cols]` transpose of a flat row-major matrix.
pub fn transpose<E: Element>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    assert_eq!(a.len(), rows * cols);
    let mut t = vec![E::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// `C[m,n] = A[m,k] * B[k,n]`. Inner accumulation walks `k` in ascending
/// order for each output element; rows may be computed in parallel.
pub fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    assert_eq!(a.len(), m * k, "matmul lhs size");
    assert_eq!(b.len(), k * n, "matmul rhs size");
    let mut c = vec![E::zero(); m * n];
    let row = |(i, crow): (usize, &mut [E])| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..kk * n + n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    };
    if m * k * n >= PAR_MACS && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `C[m,p] = A[m,k] * B[p,k]^T`.
pub fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, p: usize) -> Vec<E> {
    let bt = transpose(b, p, k);
    matmul(a, &bt, m, k, p)
}

/// `C[k,n] = A[m,k]^T * B[m,n]`.
pub fn matmul_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let at = transpose(a, m, k);
    matmul(&at, b, k, m, n)
}
