//! Dense row-major f64 tensors and the forward ops shared by the pure API
//! and the autodiff tape.
//!
//! Everything is 64-bit: the gradient-verification suite depends on tight
//! tolerances that 32-bit arithmetic cannot meet.

pub mod fd;
pub mod tape;

pub use fd::{finite_diff_grad, max_rel_err};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Additive mask constant standing in for -inf: saturates softmax to zero
/// beyond double precision while keeping every intermediate finite.
pub const MASK_NEG: f64 = -1e30;

/// Dense multi-dimensional array of f64 in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
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
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
    }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(vec![c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "add: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "sub: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn hadamard(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "hadamard: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

// ── gemm kernels ─────────────────────────────────────────────────────

/// c[m×n] = a[m×k] · b[k×n] + beta·c
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c[m×n] = a[m×k] · b[n×k]ᵀ + beta·c
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c[m×n] = a[k×m]ᵀ · b[k×n] + beta·c
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

// ── pure forward ops ─────────────────────────────────────────────────

/// Standard matrix product a[m×k] · b[k×p].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() });
    }
    let (m, k, p) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(vec![m, p]);
    gemm_nn(m, k, p, &a.data, &b.data, &mut out.data, 0.0);
    Ok(out)
}

/// Row-wise softmax with max-subtraction. `mask[i*m+j] == true` excludes
/// entry (i,j) by adding [`MASK_NEG`] before normalizing. A fully masked
/// row is an error.
pub fn softmax_rows(logits: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let (n, m) = (logits.rows(), logits.cols());
    if let Some(ma) = mask {
        assert_eq!(ma.len(), n * m, "softmax_rows: mask length mismatch");
    }
    let mut out = Tensor::zeros(logits.shape.clone());
    for i in 0..n {
        if let Some(ma) = mask {
            if ma[i * m..(i + 1) * m].iter().all(|&x| x) {
                return Err(Error::DegenerateRow { row: i });
            }
        }
        let row = &logits.data[i * m..(i + 1) * m];
        let eff = |j: usize| {
            let masked = mask.map(|ma| ma[i * m + j]).unwrap_or(false);
            if masked { row[j] + MASK_NEG } else { row[j] }
        };
        let mut mx = f64::NEG_INFINITY;
        for j in 0..m {
            mx = mx.max(eff(j));
        }
        let mut sum = 0.0;
        for j in 0..m {
            let e = (eff(j) - mx).exp();
            out.data[i * m + j] = e;
            sum += e;
        }
        for j in 0..m {
            out.data[i * m + j] /= sum;
        }
    }
    Ok(out)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tanh-approximation GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

/// Per-row normalization to zero mean / unit variance, then affine.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let d = x.cols();
    assert_eq!(gamma.numel(), d, "layernorm: gamma length mismatch");
    assert_eq!(beta.numel(), d, "layernorm: beta length mismatch");
    let mut out = Tensor::zeros(x.shape.clone());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out.data[i * d + j] = (row[j] - mean) * inv * gamma.data[j] + beta.data[j];
        }
    }
    out
}

/// Mean negative log-softmax probability over unmasked positions.
/// `ignore[i] == true` drops row i from the mean.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], ignore: Option<&[bool]>) -> Result<f64> {
    let (n, v) = (logits.rows(), logits.cols());
    assert_eq!(targets.len(), n, "cross_entropy: target count mismatch");
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if ignore.map(|m| m[i]).unwrap_or(false) {
            continue;
        }
        if targets[i] >= v {
            return Err(Error::IndexOutOfRange { what: "cross_entropy target", index: targets[i], limit: v });
        }
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
        total += lse - row[targets[i]];
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptySelection("cross_entropy: all positions masked"));
    }
    Ok(total / count as f64)
}

/// Rotary rotation of row i by position (pos_offset + i), applied to
/// consecutive coordinate pairs. Used on per-head Q and K.
pub fn rope_rotate(x: &Tensor, pos_offset: usize, theta: f64, inverse: bool) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    assert!(d % 2 == 0, "rope: head dimension must be even");
    let mut out = Tensor::zeros(x.shape.clone());
    let sign = if inverse { -1.0 } else { 1.0 };
    for i in 0..n {
        let pos = (pos_offset + i) as f64;
        for p in 0..d / 2 {
            let freq = theta.powf(-2.0 * p as f64 / d as f64);
            let angle = sign * pos * freq;
            let (s, c) = angle.sin_cos();
            let a = x.data[i * d + 2 * p];
            let b = x.data[i * d + 2 * p + 1];
            out.data[i * d + 2 * p] = a * c - b * s;
            out.data[i * d + 2 * p + 1] = a * s + b * c;
        }
    }
    out
}
