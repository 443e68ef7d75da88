//! Row-major dense matrices and the handful of kernels the model needs.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// First `n` rows as a new matrix.
    pub fn head_rows(&self, n: usize) -> Self {
        Self::from_vec(n, self.cols, self.data[..n * self.cols].to_vec())
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `x (n×k) · w (k×m)`.
pub(crate) fn matmul<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>) -> Matrix<T> {
    assert_eq!(x.cols, w.rows, "matmul inner dimension");
    let mut out = Matrix::zeros(x.rows, w.cols);
    for i in 0..x.rows {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        for (k, &a) in xi.iter().enumerate() {
            if a != T::zero() {
                axpy(a, w.row(k), oi);
            }
        }
    }
    out
}

/// Backward of `y = x · w`: returns `dx` and accumulates into `dw` when given.
pub(crate) fn matmul_backward<T: Scalar>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    dy: &Matrix<T>,
    dw: Option<&mut Matrix<T>>,
) -> Matrix<T> {
    let mut dx = Matrix::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let dyi = dy.row(i);
        let dxi = dx.row_mut(i);
        for (k, d) in dxi.iter_mut().enumerate() {
            *d = dot(dyi, w.row(k));
        }
    }
    if let Some(dw) = dw {
        for i in 0..x.rows {
            let dyi = dy.row(i);
            for (k, &a) in x.row(i).iter().enumerate() {
                if a != T::zero() {
                    axpy(a, dyi, dw.row_mut(k));
                }
            }
        }
    }
    dx
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Numerically stable log-softmax of one row.
pub(crate) fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let sum: T = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&z| z - lse).collect()
}
