//! Dense row-major containers and the handful of kernels the forward pass
//! needs. Every reduction runs in a fixed index order so results are
//! reproducible bit for bit.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return invalid("ragged rows");
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return invalid(format!(
                "cannot add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

/// `[heads × tokens × dim]` tensor holding one matrix per attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor<T> {
    heads: usize,
    tokens: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> HeadTensor<T> {
    pub fn zeros(heads: usize, tokens: usize, dim: usize) -> Self {
        Self {
            heads,
            tokens,
            dim,
            data: vec![T::zero(); heads * tokens * dim],
        }
    }

    pub fn from_vec(heads: usize, tokens: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != heads * tokens * dim {
            return invalid(format!(
                "head tensor {heads}x{tokens}x{dim} needs {} values, got {}",
                heads * tokens * dim,
                data.len()
            ));
        }
        Ok(Self {
            heads,
            tokens,
            dim,
            data,
        })
    }

    /// Treats a token matrix as a single head.
    pub fn from_matrix(m: &Matrix<T>) -> Self {
        Self {
            heads: 1,
            tokens: m.rows(),
            dim: m.cols(),
            data: m.as_slice().to_vec(),
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn head(&self, h: usize) -> &[T] {
        let n = self.tokens * self.dim;
        &self.data[h * n..(h + 1) * n]
    }

    pub fn head_mut(&mut self, h: usize) -> &mut [T] {
        let n = self.tokens * self.dim;
        &mut self.data[h * n..(h + 1) * n]
    }

    pub fn row(&self, h: usize, t: usize) -> &[T] {
        let start = (h * self.tokens + t) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn row_mut(&mut self, h: usize, t: usize) -> &mut [T] {
        let start = (h * self.tokens + t) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `x · W + b` with `W` stored `[in × out]` row-major.
///
/// Each output element accumulates over the input dimension in ascending
/// order, starting from zero; the bias is added last.
pub fn linear<T: Scalar>(x: &Matrix<T>, weight: &[T], bias: &[T], out: usize) -> Result<Matrix<T>> {
    let inp = x.cols();
    if weight.len() != inp * out || bias.len() != out {
        return invalid(format!(
            "linear {inp}->{out}: weight has {} values, bias {}",
            weight.len(),
            bias.len()
        ));
    }
    let mut y = Matrix::zeros(x.rows(), out);
    for i in 0..x.rows() {
        let xi = x.row(i);
        let yi = y.row_mut(i);
        for (k, &xk) in xi.iter().enumerate() {
            let wk = &weight[k * out..(k + 1) * out];
            for (yj, &w) in yi.iter_mut().zip(wk) {
                *yj += xk * w;
            }
        }
        for (yj, &b) in yi.iter_mut().zip(bias) {
            *yj += b;
        }
    }
    Ok(y)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

pub fn layer_norm<T: Scalar>(x: &Matrix<T>, gamma: &[T], beta: &[T]) -> Result<Matrix<T>> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return invalid(format!("layer norm over {c} channels got {} / {} params", gamma.len(), beta.len()));
    }
    let eps = T::lit(LAYER_NORM_EPS);
    let n = T::of_usize(c);
    let mut y = Matrix::zeros(x.rows(), c);
    for i in 0..x.rows() {
        let xi = x.row(i);
        let mean = xi.iter().copied().sum::<T>() / n;
        let mut var = T::zero();
        for &v in xi {
            let d = v - mean;
            var += d * d;
        }
        let inv = T::one() / (var / n + eps).sqrt();
        for (j, yj) in y.row_mut(i).iter_mut().enumerate() {
            *yj = (xi[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    Ok(y)
}

/// tanh-approximated GELU, applied in place.
pub fn gelu_inplace<T: Scalar>(x: &mut Matrix<T>) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    for v in x.as_mut_slice() {
        let u = *v;
        *v = half * u * (T::one() + (c * (u + k * u * u * u)).tanh());
    }
}

/// Numerically stable softmax over one row, in place.
pub fn softmax_inplace<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
