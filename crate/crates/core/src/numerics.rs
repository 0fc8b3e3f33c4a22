//! Dense row-major matrices, cosine similarity and unit normalization.
//!
//! Every gradient in the crate is chained by hand through the functions in
//! this module, so each forward operation has a matching backward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are rejected by [`normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Tolerance on row norms accepted by [`EmbeddingBatch`].
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Returns the position of the first non-finite entry, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(p) => Err(Error::NonFinite {
                row: p / self.cols.max(1),
                col: p % self.cols.max(1),
            }),
            None => Ok(()),
        }
    }

    /// Rows picked by `indices`, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two unit vectors, which is their dot product.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(dot(a, b))
}

pub fn normalize(z: &[f64]) -> Result<Vec<f64>> {
    let n = norm(z);
    if !(n > NORM_EPS) {
        return Err(Error::DegenerateNorm {
            norm: n,
            threshold: NORM_EPS,
        });
    }
    Ok(z.iter().map(|x| x / n).collect())
}

/// Gradient of `g · normalize(z)` with respect to `z`, i.e.
/// `(I - v vᵀ) g / ‖z‖` with `v = z / ‖z‖`.
pub fn normalize_backward(z: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    if z.len() != upstream.len() {
        return Err(Error::DimensionMismatch {
            expected: z.len(),
            actual: upstream.len(),
        });
    }
    let n = norm(z);
    if !(n > NORM_EPS) {
        return Err(Error::DegenerateNorm {
            norm: n,
            threshold: NORM_EPS,
        });
    }
    let radial: f64 = z.iter().zip(upstream).map(|(a, g)| a * g).sum::<f64>() / n;
    Ok(z
        .iter()
        .zip(upstream)
        .map(|(a, g)| (g - radial * a / n) / n)
        .collect())
}

pub fn normalize_rows(z: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for r in 0..z.rows() {
        let v = normalize(z.row(r))?;
        out.row_mut(r).copy_from_slice(&v);
    }
    Ok(out)
}

pub fn normalize_rows_backward(z: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    if z.shape() != upstream.shape() {
        return Err(Error::DimensionMismatch {
            expected: z.rows() * z.cols(),
            actual: upstream.rows() * upstream.cols(),
        });
    }
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for r in 0..z.rows() {
        let g = normalize_backward(z.row(r), upstream.row(r))?;
        out.row_mut(r).copy_from_slice(&g);
    }
    Ok(out)
}

/// Unit-norm embeddings with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    embeddings: Matrix,
    labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != embeddings.rows() {
            return Err(Error::DimensionMismatch {
                expected: embeddings.rows(),
                actual: labels.len(),
            });
        }
        if embeddings.rows() < 2 {
            return Err(Error::InvalidBatch(format!(
                "need at least 2 rows, got {}",
                embeddings.rows()
            )));
        }
        embeddings.check_finite()?;
        for r in 0..embeddings.rows() {
            let n = norm(embeddings.row(r));
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotUnitNorm { row: r, norm: n });
            }
        }
        Ok(Self { embeddings, labels })
    }

    /// Normalizes every row of `raw` and builds the batch.
    pub fn from_unnormalized(raw: &Matrix, labels: Vec<usize>) -> Result<Self> {
        Self::new(normalize_rows(raw)?, labels)
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

/// Gram matrix of dot products between rows. Rows need not be unit-norm.
pub fn gram(x: &Matrix) -> Matrix {
    let n = x.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s = dot(x.row(i), x.row(j));
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    out
}

/// All pairwise cosine similarities of a batch.
pub fn pairwise_cosine(batch: &EmbeddingBatch) -> Matrix {
    gram(batch.embeddings())
}

/// Chains a gradient with respect to the Gram matrix back to the rows:
/// `s_qk = x_q · x_k` contributes `g_qk x_k` to row `q` and `g_qk x_q` to row `k`.
pub fn gram_backward(x: &Matrix, grad_sims: &Matrix) -> Matrix {
    let (n, d) = x.shape();
    let mut out = Matrix::zeros(n, d);
    for q in 0..n {
        for k in 0..n {
            let g = grad_sims.get(q, k);
            if g == 0.0 {
                continue;
            }
            for c in 0..d {
                let xk = x.get(k, c);
                let xq = x.get(q, c);
                out.as_mut_slice()[q * d + c] += g * xk;
                out.as_mut_slice()[k * d + c] += g * xq;
            }
        }
    }
    out
}
