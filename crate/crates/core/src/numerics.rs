//! Dense real-matrix kernels and verification utilities.
//!
//! Row-major `f64` matrices plus the handful of primitives the losses are
//! built from: row normalization, temperature softmax, similarity matrices,
//! row-wise cross-entropy, summed per-dimension variance, and a central
//! finite-difference gradient oracle. All functions are pure.

use crate::error::{CclError, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds from row-major data; the length must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CclError::DimensionMismatch {
                expected: format!("{rows}x{cols} = {} values", rows * cols),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(CclError::DimensionMismatch {
                    expected: format!("{cols} columns"),
                    got: format!("{} columns", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other^T`; rows of both are treated as vectors of equal length.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(CclError::DimensionMismatch {
                expected: format!("{} columns", self.cols),
                got: format!("{} columns", other.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// Plain `self * other`: `(rows x cols_other)`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(CclError::DimensionMismatch {
                expected: format!("{} rows", self.cols),
                got: format!("{} rows", other.rows),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            for (k, &av) in a.iter().enumerate() {
                let b = other.row(k);
                let row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += av * bv;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other` contracted over rows: `(cols_self x cols_other)`.
    #[allow(clippy::needless_range_loop)]
    pub fn transposed_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(CclError::DimensionMismatch {
                expected: format!("{} rows", self.rows),
                got: format!("{} rows", other.rows),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for i in 0..self.cols {
                let ai = a[i];
                let row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bj) in row.iter_mut().zip(b) {
                    *o += ai * bj;
                }
            }
        }
        Ok(out)
    }

    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Rescales every row to unit Euclidean norm.
///
/// A row with norm below `1e-12` signals a dead encoder output and is an
/// error rather than a silent division.
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let n = norm(out.row(i));
        if n < 1e-12 {
            return Err(CclError::DegenerateEmbedding);
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
    }
    Ok(out)
}

/// Row-wise softmax of `m / tau` with per-row max subtraction.
pub fn softmax_rows(m: &Matrix, tau: f64) -> Result<Matrix> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(CclError::InvalidTemperature);
    }
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Pairwise dot products: `out[i][j] = a_i . b_j`.
pub fn similarity_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul_transposed(b)
}

/// Mean over rows of `-sum_j target[i][j] * ln(pred[i][j])`.
pub fn row_cross_entropy(p_target: &Matrix, p_pred: &Matrix) -> Result<f64> {
    if p_target.rows() != p_pred.rows() || p_target.cols() != p_pred.cols() {
        return Err(CclError::DimensionMismatch {
            expected: format!("{}x{}", p_target.rows(), p_target.cols()),
            got: format!("{}x{}", p_pred.rows(), p_pred.cols()),
        });
    }
    let mut total = 0.0;
    for (t, p) in p_target.data().iter().zip(p_pred.data()) {
        if *p <= 1e-300 {
            return Err(CclError::LogUnderflow);
        }
        total -= t * p.ln();
    }
    Ok(total / p_target.rows() as f64)
}

/// Sum over dimensions of the population variance of each column.
pub fn sum_dim_variance(vectors: &Matrix) -> Result<f64> {
    let n = vectors.rows();
    if n < 2 {
        return Err(CclError::NeedTwoViews);
    }
    let mut total = 0.0;
    for d in 0..vectors.cols() {
        let mean = (0..n).map(|i| vectors.get(i, d)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (vectors.get(i, d) - mean).powi(2)).sum::<f64>() / n as f64;
        total += var;
    }
    Ok(total)
}

/// Central-difference gradient of a scalar objective at `x`.
///
/// Entry `(i, j)` of the result is `(f(x + eps e_ij) - f(x - eps e_ij)) / (2 eps)`.
pub fn finite_diff_grad<F>(mut f: F, x: &Matrix, eps: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(CclError::Config("finite difference eps must be positive".into()));
    }
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for idx in 0..x.data().len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[idx] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CclError::ObjectiveNotFinite);
        }
        grad.data_mut()[idx] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Relative error with an absolute floor, for gradient checks. The floor
/// sits above central-difference cancellation noise at eps = 1e-5.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}
