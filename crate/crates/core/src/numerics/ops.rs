//! Pure tensor primitives.
//!
//! Every function here allocates its output and never mutates its inputs.
//! The differentiable versions live on [`Tape`](super::Tape); they call into
//! the same kernels so that forward values are bit-identical either way.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Rows handed to one GEMM call. Fixed so that results never depend on the
/// number of worker threads.
const ROW_BLOCK: usize = 128;
const PAR_MIN_WORK: usize = 1 << 18;

/// Strided view of a row-major matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transposed view; no data is moved.
    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a·b` (or `out += a·b` when `accumulate`), `out` row-major `m×n`.
pub(crate) fn gemm_into(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner extents");
    assert_eq!(out.len(), m * n, "gemm output extent");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };

    let run_block = |(blk, c_block): (usize, &mut [f64])| {
        let r0 = blk * ROW_BLOCK;
        let rows = c_block.len() / n;
        // SAFETY: the A pointer is offset by r0 logical rows, which stays inside
        // `a.data` for both layouts; B and C extents were asserted above.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.data.as_ptr().offset(r0 as isize * rsa),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };

    if m * k * n >= PAR_MIN_WORK && m > ROW_BLOCK {
        out.par_chunks_mut(ROW_BLOCK * n)
            .enumerate()
            .for_each(run_block);
    } else {
        out.chunks_mut(ROW_BLOCK * n).enumerate().for_each(run_block);
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::invalid(op, format!("expected a 2-d tensor, got {s:?}"))),
    }
}

/// `C[i,j] = Σ_t A[i,t]·B[t,j]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm_into(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), &mut out, false);
    Tensor::new([m, n], out)?.ensure_finite("matmul")
}

/// Affine map along the last axis: `x·W + b`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d_in, d_out) = require_2d("linear", w)?;
    if x.cols() != d_in {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    if b.shape() != [d_out] {
        return Err(Error::shape("linear", w.shape(), b.shape()));
    }
    let rows = x.rows();
    let mut out = vec![0.0; rows * d_out];
    gemm_into(MatRef::new(x.data(), rows, d_in), MatRef::new(w.data(), d_in, d_out), &mut out, false);
    add_bias_rows(&mut out, b.data());
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(shape, out)?.ensure_finite("linear")
}

pub(crate) fn add_bias_rows(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// In-place row softmax with max subtraction.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "softmax_rows" });
    }
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    out.ensure_finite("softmax_rows")
}

/// Per-row normalization statistics: returns `(xhat, inv_std)`.
pub(crate) fn normalize_rows(x: &[f64], d: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv_std)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let (mut out, _) = normalize_rows(x.data(), d, eps);
    for row in out.chunks_mut(d) {
        for ((o, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *o = *o * g + b;
        }
    }
    Tensor::new(x.shape().to_vec(), out)?.ensure_finite("layer_norm")
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact erf-form GELU of a scalar.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.map(gelu_scalar).ensure_finite("gelu")
}
