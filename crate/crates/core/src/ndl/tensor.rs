//! Dense row-major matrices and constant sparse matrices. These are the
//! value types the tape differentiates through; all arithmetic is f64.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// A rows x cols matrix of f64, row-major. Shape is fixed at creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Tensor {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), rows * cols, "data length does not match shape");
        Tensor { rows, cols, data }
    }

    pub fn from_nested(rows: &[Vec<f64>]) -> Tensor {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        assert!(rows.iter().all(|x| x.len() == c), "ragged rows");
        Tensor { rows: r, cols: c, data: rows.concat() }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add(&self, o: &Tensor) -> Tensor {
        assert_eq!(self.shape(), o.shape());
        self.zip(o, |a, b| a + b)
    }

    pub fn sub(&self, o: &Tensor) -> Tensor {
        assert_eq!(self.shape(), o.shape());
        self.zip(o, |a, b| a - b)
    }

    pub fn mul(&self, o: &Tensor) -> Tensor {
        assert_eq!(self.shape(), o.shape());
        self.zip(o, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| k * v)
    }

    fn zip(&self, o: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(o.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += o`.
    pub fn acc(&mut self, o: &Tensor) {
        assert_eq!(self.shape(), o.shape());
        for (a, b) in self.data.iter_mut().zip(o.data.iter()) {
            *a += b;
        }
    }

    /// `self += k * o`.
    pub fn acc_scaled(&mut self, o: &Tensor, k: f64) {
        assert_eq!(self.shape(), o.shape());
        for (a, b) in self.data.iter_mut().zip(o.data.iter()) {
            *a += k * b;
        }
    }

    /// `self += a ∘ b` (elementwise product).
    pub fn acc_mul(&mut self, a: &Tensor, b: &Tensor) {
        assert_eq!(self.shape(), a.shape());
        assert_eq!(self.shape(), b.shape());
        for i in 0..self.data.len() {
            self.data[i] += a.data[i] * b.data[i];
        }
    }

    /// `a · b` with an i-k-j loop so the inner pass runs along rows.
    pub fn matmul(&self, o: &Tensor) -> Tensor {
        assert_eq!(self.cols, o.rows, "matmul inner dimensions differ");
        let mut out = Tensor::zeros(self.rows, o.cols);
        out.acc_matmul(self, o);
        out
    }

    /// `self += a · b`.
    pub fn acc_matmul(&mut self, a: &Tensor, b: &Tensor) {
        assert_eq!(a.cols, b.rows);
        assert_eq!(self.rows, a.rows);
        assert_eq!(self.cols, b.cols);
        let n = b.cols;
        for i in 0..a.rows {
            let out_row = &mut self.data[i * n..(i + 1) * n];
            let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
            for (k, &aik) in a_row.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let b_row = &b.data[k * n..(k + 1) * n];
                for j in 0..n {
                    out_row[j] += aik * b_row[j];
                }
            }
        }
    }

    /// `self += a · bᵀ`.
    pub fn acc_matmul_nt(&mut self, a: &Tensor, b: &Tensor) {
        assert_eq!(a.cols, b.cols);
        assert_eq!(self.rows, a.rows);
        assert_eq!(self.cols, b.rows);
        for i in 0..a.rows {
            let a_row = a.row(i);
            for j in 0..b.rows {
                let b_row = b.row(j);
                let mut s = 0.0;
                for k in 0..a.cols {
                    s += a_row[k] * b_row[k];
                }
                self.data[i * self.cols + j] += s;
            }
        }
    }

    /// `self += aᵀ · b`.
    pub fn acc_matmul_tn(&mut self, a: &Tensor, b: &Tensor) {
        assert_eq!(a.rows, b.rows);
        assert_eq!(self.rows, a.cols);
        assert_eq!(self.cols, b.cols);
        let n = b.cols;
        for m in 0..a.rows {
            let a_row = a.row(m);
            let b_row = &b.data[m * n..(m + 1) * n];
            for (i, &ami) in a_row.iter().enumerate() {
                if ami == 0.0 {
                    continue;
                }
                let out_row = &mut self.data[i * n..(i + 1) * n];
                for j in 0..n {
                    out_row[j] += ami * b_row[j];
                }
            }
        }
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
}

/// Constant sparse matrix in triplet form, sorted by row. Used for graph
/// adjacency, temporal pooling, and finite-difference stencils, none of
/// which carry gradients themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct Sparse {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Sparse {
    /// Duplicate coordinates are summed.
    pub fn from_entries(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Sparse {
        assert!(
            entries.iter().all(|&(r, c, _)| r < rows && c < cols),
            "sparse entry out of range"
        );
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        Sparse { rows, cols, entries: merged }
    }

    pub fn identity(n: usize) -> Sparse {
        Sparse {
            rows: n,
            cols: n,
            entries: (0..n).map(|i| (i, i, 1.0)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// `self · x` for dense `x`.
    pub fn matmul_dense(&self, x: &Tensor) -> Tensor {
        assert_eq!(self.cols, x.rows(), "sparse matmul inner dimensions differ");
        let mut out = Tensor::zeros(self.rows, x.cols());
        for &(r, c, v) in &self.entries {
            let src = x.row(c);
            let dst = out.row_mut(r);
            for j in 0..src.len() {
                dst[j] += v * src[j];
            }
        }
        out
    }

    /// `out += selfᵀ · dy`; the adjoint of [`Sparse::matmul_dense`].
    pub fn acc_t_matmul_dense(&self, out: &mut Tensor, dy: &Tensor) {
        assert_eq!(self.rows, dy.rows());
        assert_eq!(self.cols, out.rows());
        assert_eq!(out.cols(), dy.cols());
        for &(r, c, v) in &self.entries {
            let src = dy.row(r);
            let dst = out.row_mut(c);
            for j in 0..src.len() {
                dst[j] += v * src[j];
            }
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            out.set(r, c, out.get(r, c) + v);
        }
        out
    }
}
