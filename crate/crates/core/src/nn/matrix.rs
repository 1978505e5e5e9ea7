//! Dense row-major f64 matrices with the handful of kernels the rest of the
//! crate needs. Everything runs on one core, so the hot paths (`matmul`,
//! `axpy`, `dot`) are written as manually unrolled loops rather than naive
//! index arithmetic; that is worth roughly 2-3x on the training loop.

use crate::error::{Error, Result};

/// Row-major matrix. Rows are samples, columns are features.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                context: "Matrix::from_vec".into(),
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Single row vector.
    pub fn row_vec(data: Vec<f64>) -> Self {
        Matrix { rows: 1, cols: data.len(), data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Apply `f` elementwise, returning a new matrix.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self @ other`: (m,k) x (k,n) -> (m,n).
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        // ikj order: stream over `other` rows, accumulate into the output row.
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, &other.data[p * n..(p + 1) * n], orow);
            }
        }
        out
    }

    /// `self^T @ other`: (m,k)^T x (m,n) -> (k,n). Used in backward passes.
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_tn outer dims");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(k, n);
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let brow = &other.data[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, brow, &mut out.data[p * n..(p + 1) * n]);
            }
        }
        out
    }

    /// `self @ other^T`: (m,k) x (n,k)^T -> (m,n). Used in backward passes.
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dims");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (j, o) in orow.iter_mut().enumerate() {
                *o = dot(arow, &other.data[j * k..(j + 1) * k]);
            }
        }
        out
    }

    /// Add `bias` (1 x cols) to every row.
    pub fn add_row_broadcast(&self, bias: &[f64]) -> Matrix {
        assert_eq!(self.cols, bias.len(), "broadcast width");
        let mut out = self.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        out
    }

    /// Sum over rows -> vector of length `cols`.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            axpy(1.0, self.row(r), &mut out);
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.rows, other.rows, "add_assign rows");
        assert_eq!(self.cols, other.cols, "add_assign cols");
        axpy(1.0, &other.data, &mut self.data);
    }

    /// Horizontal concatenation [self | other].
    pub fn concat_cols(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "concat_cols rows");
        let cols = self.cols + other.cols;
        let mut out = Matrix::zeros(self.rows, cols);
        for r in 0..self.rows {
            out.data[r * cols..r * cols + self.cols].copy_from_slice(self.row(r));
            out.data[r * cols + self.cols..(r + 1) * cols].copy_from_slice(other.row(r));
        }
        out
    }

    /// Columns `[start, start+width)` as a new matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols, "slice_cols bounds");
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }
}

/// `y += a * x`, unrolled by 4.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len();
    let chunks = n / 4;
    for i in 0..chunks {
        let b = i * 4;
        y[b] += a * x[b];
        y[b + 1] += a * x[b + 1];
        y[b + 2] += a * x[b + 2];
        y[b + 3] += a * x[b + 3];
    }
    for i in chunks * 4..n {
        y[i] += a * x[i];
    }
}

/// Inner product, four partial accumulators so the adds pipeline.
#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let b = i * 4;
        s0 += x[b] * y[b];
        s1 += x[b + 1] * y[b + 1];
        s2 += x[b + 2] * y[b + 2];
        s3 += x[b + 3] * y[b + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += x[i] * y[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}
