//! Dense row-major `f64` tensors and the forward kernels shared by the
//! autodiff graph and the plain inference helpers.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Norm floor used by [`cosine_matrix`] unless a caller picks another.
pub const COSINE_EPS: f64 = 1e-8;

/// Variance epsilon inside layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("data", &Preview(&self.data))
            .finish()
    }
}

struct Preview<'a>(&'a [f64]);

impl fmt::Debug for Preview<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.len() <= 8 {
            write!(f, "{:?}", self.0)
        } else {
            write!(f, "{:?} .. ({} values)", &self.0[..8], self.0.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinities.
    pub fn new_finite(shape: Vec<usize>, data: Vec<f64>, what: &str) -> Result<Self> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: what.to_string(),
                index,
            });
        }
        Self::new(shape, data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            shape: vec![rows.len(), cols],
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn from `N(0, std^2)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix. Vectors count as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count of a matrix; for a vector, its length.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    pub(crate) fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::dim(op, format!("expected a matrix, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "elementwise",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
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

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// In-place `self += k * other`; shapes must match.
    pub fn axpy(&mut self, k: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.expect_matrix("matmul")?;
        let (k2, n) = other.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: {m}x{k} times {k2}x{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::matrix(n, m, out)
    }

    /// Adds `bias` (length = column count) to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Self> {
        let (m, n) = self.expect_matrix("add_row")?;
        if bias.len() != n {
            return Err(Error::dim(
                "add_row",
                format!("bias of length {} against {n} columns", bias.len()),
            ));
        }
        let mut out = self.data.clone();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Self::matrix(m, n, out)
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (m, n) = self.expect_matrix("slice_rows")?;
        if start > end || end > m {
            return Err(Error::dim("slice_rows", format!("rows {start}..{end} of {m}")));
        }
        Self::matrix(end - start, n, self.data[start * n..end * n].to_vec())
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (m, n) = self.expect_matrix("slice_cols")?;
        if start > end || end > n {
            return Err(Error::dim("slice_cols", format!("cols {start}..{end} of {n}")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Self::matrix(m, w, out)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let cols = match parts.first() {
            Some(p) => p.expect_matrix("concat_rows")?.1,
            None => return Err(Error::dim("concat_rows", "no parts")),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (m, n) = p.expect_matrix("concat_rows")?;
            if n != cols {
                return Err(Error::dim("concat_rows", format!("{n} columns vs {cols}")));
            }
            rows += m;
            data.extend_from_slice(&p.data);
        }
        Self::matrix(rows, cols, data)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let rows = match parts.first() {
            Some(p) => p.expect_matrix("concat_cols")?.0,
            None => return Err(Error::dim("concat_cols", "no parts")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (m, n) = p.expect_matrix("concat_cols")?;
            if m != rows {
                return Err(Error::dim("concat_cols", format!("{m} rows vs {rows}")));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Self::matrix(rows, total, data)
    }

    /// Index of the largest entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let n = self.cols();
        (0..self.rows())
            .map(|i| {
                let row = &self.data[i * n..(i + 1) * n];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.expect_matrix("softmax_rows")?;
    let mut out = x.data.clone();
    for row in out.chunks_mut(n.max(1)).take(m) {
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
    Tensor::matrix(m, n, out)
}

/// Row-wise `x - logsumexp(x)`.
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.expect_matrix("log_softmax_rows")?;
    let mut out = x.data.clone();
    for row in out.chunks_mut(n.max(1)).take(m) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::matrix(m, n, out)
}

/// Pairwise cosine similarity with norms floored at `eps`, so zero rows score 0.
pub fn cosine_matrix(a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    let (p, d) = a.expect_matrix("cosine_matrix")?;
    let (q, d2) = b.expect_matrix("cosine_matrix")?;
    if d != d2 || d == 0 {
        return Err(Error::dim("cosine_matrix", format!("row widths {d} and {d2}")));
    }
    let na = row_norms(a, eps);
    let nb = row_norms(b, eps);
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        let ai = a.row(i);
        for j in 0..q {
            let dot: f64 = ai.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            out[i * q + j] = dot / (na[i] * nb[j]);
        }
    }
    Tensor::matrix(p, q, out)
}

pub(crate) fn row_norms(x: &Tensor, eps: f64) -> Vec<f64> {
    (0..x.rows())
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(eps))
        .collect()
}

/// Per-row normalization statistics cached for the backward pass.
pub(crate) struct NormStats {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layernorm_stats(x: &Tensor) -> Result<NormStats> {
    let (m, d) = x.expect_matrix("layernorm")?;
    if d == 0 {
        return Err(Error::dim("layernorm", "zero-width rows"));
    }
    let mut normalized = x.data.clone();
    let mut inv_std = Vec::with_capacity(m);
    for row in normalized.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * s;
        }
        inv_std.push(s);
    }
    Ok(NormStats {
        normalized: Tensor::matrix(m, d, normalized)?,
        inv_std,
    })
}

/// Layer normalization over the last axis followed by `gain * x + bias`.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let stats = layernorm_stats(x)?;
    apply_affine(&stats.normalized, gain, bias)
}

pub(crate) fn apply_affine(xhat: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = xhat.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim(
            "layernorm",
            format!("gain/bias of length {}/{} against width {d}", gain.len(), bias.len()),
        ));
    }
    let mut out = xhat.data.clone();
    for row in out.chunks_mut(d) {
        for ((v, g), b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
            *v = *v * g + b;
        }
    }
    Tensor::matrix(xhat.rows(), d, out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![], vec![1.0]).is_ok());
    }

    #[test]
    fn rejects_non_finite() {
        let err = Tensor::new_finite(vec![2], vec![1.0, f64::NAN], "x").unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, 5.0], &[0.0, 1.5, -7.0]]);
        assert_eq!(Tensor::eye(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let s = softmax_rows(&Tensor::zeros(&[1, 4])).unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let s = softmax_rows(&Tensor::from_rows(&[&[1000.0, 0.0]])).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert!(s.get(0, 1) >= 0.0 && s.get(0, 1) < 1e-300);
    }

    #[test]
    fn cosine_cases() {
        let a = Tensor::from_rows(&[&[1.0, 1.0]]);
        let b = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let c = cosine_matrix(&a, &b, COSINE_EPS).unwrap();
        assert!((c.get(0, 0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        let c = cosine_matrix(&b, &b, COSINE_EPS).unwrap();
        assert_eq!(c.data(), &[1.0, 0.0, 0.0, 1.0]);
        let z = Tensor::zeros(&[1, 2]);
        assert_eq!(cosine_matrix(&z, &b, COSINE_EPS).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn layernorm_constant_row_collapses_to_bias() {
        let x = Tensor::full(&[1, 4], 3.0);
        let y = layernorm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_moments() {
        let x = Tensor::from_rows(&[&[1.0, 5.0, -2.0, 0.5, 9.0]]);
        let y = layernorm(&x, &Tensor::full(&[5], 1.0), &Tensor::zeros(&[5])).unwrap();
        let mean = y.sum() / 5.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[5.0], &[6.0]]);
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.slice_cols(2, 3).unwrap(), b);
        let r = Tensor::concat_rows(&[&a, &a]).unwrap();
        assert_eq!(r.slice_rows(2, 4).unwrap(), a);
    }
}
