//! Dense row-major 2-D arrays of `f64` and the GEMM kernel used by the
//! differentiation tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A row-major matrix. Vectors are stored as `1 × n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Returns a copy of rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.rows, "row slice out of bounds");
        Tensor::from_vec(len, self.cols, self.data[start * self.cols..(start + len) * self.cols].to_vec())
    }

    pub fn concat_rows(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.cols, b.cols, "concat_rows column mismatch");
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor::from_vec(a.rows + b.rows, a.cols, data)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self @ other`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            1.0,
            MatRef::row_major(&self.data, self.cols),
            MatRef::row_major(&other.data, other.cols),
            0.0,
            MatMut::row_major(&mut out.data, other.cols),
        );
        out
    }
}

/// Read-only strided view used by [`gemm`].
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self { data, offset: 0, row_stride: cols as isize, col_stride: 1 }
    }

    pub fn with_offset(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    /// Same storage, logically transposed.
    pub fn t(self) -> Self {
        Self { row_stride: self.col_stride, col_stride: self.row_stride, ..self }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset
            + (rows - 1) * self.row_stride as usize
            + (cols - 1) * self.col_stride as usize
    }
}

pub struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatMut<'a> {
    pub fn row_major(data: &'a mut [f64], cols: usize) -> Self {
        Self { data, offset: 0, row_stride: cols as isize, col_stride: 1 }
    }

    pub fn with_offset(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }
}

/// `c ← alpha · a·b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Views must use non-negative strides; bounds are checked before the
/// kernel runs.
pub fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: MatRef, b: MatRef, beta: f64, c: MatMut) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.row_stride >= 0 && a.col_stride >= 0 && b.row_stride >= 0 && b.col_stride >= 0);
    assert!(c.row_stride >= 0 && c.col_stride >= 0);
    assert!(k == 0 || a.max_index(m, k) < a.data.len(), "gemm: lhs view out of bounds");
    assert!(k == 0 || b.max_index(k, n) < b.data.len(), "gemm: rhs view out of bounds");
    let c_max = c.offset + (m - 1) * c.row_stride as usize + (n - 1) * c.col_stride as usize;
    assert!(c_max < c.data.len(), "gemm: output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.row_stride as usize + j * c.col_stride as usize;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: every element touched by the kernel lies inside the slices,
    // as checked above; `c` is uniquely borrowed and cannot alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr().add(b.offset),
            b.row_stride,
            b.col_stride,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride,
            c.col_stride,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for p in 0..a.cols {
                    s += a.at(i, p) * b.at(p, j);
                }
                out.data[i * b.cols + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive() {
        let a = Tensor::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_vec(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        assert_eq!(a.matmul(&b), naive(&a, &b));
    }

    #[test]
    fn transposed_views() {
        let a = Tensor::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_vec(2, 2, vec![1., -1., 0.5, 2.]);
        // aᵀ·b
        let mut out = vec![0.0; 6];
        gemm(
            3,
            2,
            2,
            1.0,
            MatRef::row_major(&a.data, 3).t(),
            MatRef::row_major(&b.data, 2),
            0.0,
            MatMut::row_major(&mut out, 2),
        );
        let expect = naive(&a.transpose(), &b);
        assert_eq!(out, expect.data);
    }

    #[test]
    fn column_offset_view() {
        // Second 2-column block of a 2×4 matrix times identity.
        let a = Tensor::from_vec(2, 4, vec![1., 2., 3., 4., 5., 6., 7., 8.]);
        let eye = [1.0, 0.0, 0.0, 1.0];
        let mut out = vec![0.0; 4];
        gemm(
            2,
            2,
            2,
            1.0,
            MatRef::row_major(&a.data, 4).with_offset(2),
            MatRef::row_major(&eye, 2),
            0.0,
            MatMut::row_major(&mut out, 2),
        );
        assert_eq!(out, vec![3., 4., 7., 8.]);
    }
}
