//! Dense row-major tensors and the numerical kernels the model, the
//! quantizers and the gradient engine are built on.
//!
//! All arithmetic is `f64`. Reductions run in a fixed left-to-right order so
//! that two runs over the same inputs produce bit-identical outputs; GEMM is
//! parallelised over output rows only, which leaves every reduction serial.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default LayerNorm epsilon.
pub const LAYERNORM_EPS: f64 = 1e-12;

/// Below this many multiply-adds GEMM stays on the calling thread.
const PAR_GEMM_THRESHOLD: usize = 1 << 16;

/// Dense row-major array of finite `f64` values.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?}[{}, {}, ... {} values]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data.len()
            )
        }
    }
}

impl Tensor {
    /// Builds a tensor, validating the element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dim("Tensor::new", format!("zero extent in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernel outputs whose shape is known to be valid.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::from_raw(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_raw(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Convenience constructor for 2-D literals used throughout the tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("Tensor::from_rows", "ragged rows"));
        }
        Tensor::new(vec![r, c], rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Tensor::new(vec![values.len()], values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of rows when viewed as a matrix `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Tensor::from_raw(shape.to_vec(), self.data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor::from_raw(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds a `[cols]` bias vector to every row.
    pub fn add_row_vector(&self, bias: &Tensor) -> Result<Self> {
        let c = self.last_dim();
        if bias.numel() != c {
            return Err(Error::dim(
                "add_row_vector",
                format!("bias of {} values for {c} columns", bias.numel()),
            ));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_raw(vec![c, r], out))
    }

    /// Copies a contiguous block of columns `[start, start + len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let c = self.last_dim();
        if start + len > c || len == 0 {
            return Err(Error::dim(
                "slice_cols",
                format!("[{start}, {}) of {c} columns", start + len),
            ));
        }
        let rows = self.rows();
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Ok(Tensor::from_raw(vec![rows, len], out))
    }

    /// Stacks equally-shaped 2-D tensors along the row axis.
    pub fn vstack(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Precondition("vstack of zero tensors".into()))?;
        let c = first.last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.last_dim() != c {
                return Err(Error::dim("vstack", "column count differs"));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_raw(vec![rows, c], data))
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(op, format!("expected a 2-D tensor, got {s:?}"))),
        }
    }
}

/// Dense matrix product `a[m×k] · b[k×p]`.
///
/// Each output element accumulates over `k` in increasing order, so the result
/// does not depend on thread count.
pub fn gemm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("gemm")?;
    let (k2, p) = b.dims2("gemm")?;
    if k != k2 {
        return Err(Error::dim("gemm", format!("[{m}x{k}] x [{k2}x{p}]")));
    }
    let mut out = vec![0.0; m * p];
    let kernel = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * p >= PAR_GEMM_THRESHOLD {
        out.par_chunks_mut(p).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(p).enumerate().for_each(kernel);
    }
    Ok(Tensor::from_raw(vec![m, p], out))
}

/// `aᵀ · b`.
pub fn gemm_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(&a.transpose()?, b)
}

/// `a · bᵀ`.
pub fn gemm_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, &b.transpose()?)
}

/// Coordinate-format sparse matrix holding full-precision outliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseOutlierMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseOutlierMatrix {
    pub fn empty(rows: usize, cols: usize) -> Self {
        SparseOutlierMatrix {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    /// Validates bounds, uniqueness and non-zero values.
    pub fn from_entries(
        rows: usize,
        cols: usize,
        mut entries: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        entries.sort_by_key(|&(r, c, _)| (r, c));
        for w in entries.windows(2) {
            if (w[0].0, w[0].1) == (w[1].0, w[1].1) {
                return Err(Error::Precondition(format!(
                    "duplicate sparse entry ({}, {})",
                    w[0].0, w[0].1
                )));
            }
        }
        for &(r, c, v) in &entries {
            if r >= rows || c >= cols {
                return Err(Error::dim(
                    "SparseOutlierMatrix",
                    format!("entry ({r}, {c}) outside [{rows}x{cols}]"),
                ));
            }
            if v == 0.0 || !v.is_finite() {
                return Err(Error::Precondition(format!(
                    "sparse entry ({r}, {c}) must be finite and nonzero, got {v}"
                )));
            }
        }
        Ok(SparseOutlierMatrix {
            rows,
            cols,
            entries,
        })
    }

    /// Entries are produced in row-major order and already satisfy the invariants.
    pub(crate) fn from_sorted_unchecked(
        rows: usize,
        cols: usize,
        entries: Vec<(usize, usize, f64)>,
    ) -> Self {
        SparseOutlierMatrix {
            rows,
            cols,
            entries,
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

    pub fn densify(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.rows, self.cols]);
        for &(r, c, v) in &self.entries {
            t.data[r * self.cols + c] = v;
        }
        t
    }
}

/// Sparse-times-dense product `s[m×k] · b[k×p]`.
pub fn spmm(s: &SparseOutlierMatrix, b: &Tensor) -> Result<Tensor> {
    let (k, p) = b.dims2("spmm")?;
    if s.cols != k {
        return Err(Error::dim(
            "spmm",
            format!("[{}x{}] x [{k}x{p}]", s.rows, s.cols),
        ));
    }
    let mut out = vec![0.0; s.rows * p];
    for &(r, c, v) in &s.entries {
        let b_row = &b.data[c * p..(c + 1) * p];
        for (o, &bv) in out[r * p..(r + 1) * p].iter_mut().zip(b_row) {
            *o += v * bv;
        }
    }
    Ok(Tensor::from_raw(vec![s.rows, p], out))
}

/// Row-wise LayerNorm over the last axis followed by the affine `gamma`, `beta`.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::dim(
            "layernorm",
            format!("last axis {d}, gamma {}, beta {}", gamma.numel(), beta.numel()),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Precondition("layernorm eps must be positive".into()));
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(d) {
        let (mean, inv_std) = row_moments(row, eps);
        for ((v, g), b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = (*v - mean) * inv_std * g + b;
        }
    }
    Ok(out)
}

/// Mean and `1 / sqrt(var + eps)` of one row (biased variance).
pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() {
        return Err(Error::dim(
            "softmax",
            format!("axis {axis} for shape {:?}", x.shape),
        ));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.clone();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = x.data[base + j * inner];
            }
            softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                out.data[base + j * inner] = *b;
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Grouping used for extrema and for quantizer statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Tensor,
    Row,
    Column,
}

/// Exact minima and maxima per group.
pub fn reduce_minmax(x: &Tensor, granularity: Reduction) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = x.last_dim();
    let r = x.rows();
    let groups = match granularity {
        Reduction::Tensor => 1,
        Reduction::Row => r,
        Reduction::Column => c,
    };
    if groups == 0 || x.numel() == 0 {
        return Err(Error::Precondition("empty reduction group".into()));
    }
    let mut mins = vec![f64::INFINITY; groups];
    let mut maxs = vec![f64::NEG_INFINITY; groups];
    for (i, row) in x.data.chunks(c).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let g = match granularity {
                Reduction::Tensor => 0,
                Reduction::Row => i,
                Reduction::Column => j,
            };
            mins[g] = mins[g].min(v);
            maxs[g] = maxs[g].max(v);
        }
    }
    Ok((mins, maxs))
}
