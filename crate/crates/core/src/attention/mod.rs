//! Multi-head self-attention with an optional additive logit bias.
//!
//! Two paths compute the same function:
//!
//! * [`attend_naive`] materializes the logits, adds a dense `S×S` bias,
//!   applies the row softmax and multiplies by `V`. It is the oracle.
//! * [`attend_fused`] walks one query row at a time, adding the block bias
//!   inside the softmax pass, and never builds an `S×S` logit matrix.
//!
//! Softmax denominators are accumulated in `f64` regardless of `T`.

pub mod bench;
mod capture;

pub use capture::{AttentionCapture, CaptureMode, CaptureRecord, CaptureSite, CapturedAttention};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::modulation::BiasSpec;
use crate::scalar::Scalar;
use crate::tensor::{matmul, Matrix};

/// Pre-softmax attention scores, one `S×S` matrix per head.
pub type LogitsTensor<T> = Matrix<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub capture_enabled: bool,
}

impl AttentionConfig {
    pub fn new(num_heads: usize, head_dim: usize) -> Result<Self> {
        if num_heads == 0 || head_dim == 0 {
            return Err(Error::Config(format!(
                "num_heads and head_dim must be positive, got {num_heads} and {head_dim}"
            )));
        }
        Ok(Self { num_heads, head_dim, capture_enabled: false })
    }

    pub fn model_width(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

/// Post-softmax attention weights of one head. Rows are distributions over keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor<T>(Matrix<T>);

impl<T: Scalar> AttentionTensor<T> {
    /// Wraps a matrix after checking every row is a distribution within `tol`.
    pub fn from_matrix(m: Matrix<T>, tol: f64) -> Result<Self> {
        check_row_stochastic(&m, tol)?;
        Ok(Self(m))
    }

    pub(crate) fn from_softmax(m: Matrix<T>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.0
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }
}

pub(crate) fn check_row_stochastic<T: Scalar>(m: &Matrix<T>, tol: f64) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(dim_err!("attention matrix must be square, got {:?}", m.shape()));
    }
    for i in 0..m.rows() {
        let row = m.row(i);
        if row.iter().any(|v| !(v.as_f64() >= 0.0)) {
            return Err(Error::Validation(format!("row {i} has a negative or NaN entry")));
        }
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::Validation(format!("row {i} sums to {sum}, not 1")));
        }
    }
    Ok(())
}

/// `Q·Kᵀ / sqrt(d_h)`.
pub fn compute_logits<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, head_dim: usize) -> Result<LogitsTensor<T>> {
    if q.shape() != k.shape() {
        return Err(dim_err!("Q {:?} and K {:?} differ", q.shape(), k.shape()));
    }
    if q.cols() != head_dim {
        return Err(dim_err!("head_dim {head_dim} does not match {} columns", q.cols()));
    }
    let scale = logit_scale::<T>(head_dim);
    let s = q.rows();
    let mut out = Matrix::zeros(s, s);
    for i in 0..s {
        let qi = q.row(i);
        for j in 0..s {
            let dot = qi.iter().zip(k.row(j)).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            out.set(i, j, dot * scale);
        }
    }
    Ok(out)
}

#[inline]
fn logit_scale<T: Scalar>(head_dim: usize) -> T {
    T::one() / T::of(head_dim as f64).sqrt()
}

/// In-place stable softmax of one row.
#[inline]
fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut denom = 0.0f64;
    for v in row.iter_mut() {
        let e = (*v - max).exp();
        *v = e;
        denom += e.as_f64();
    }
    let inv = T::of(1.0 / denom);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &LogitsTensor<T>) -> Result<AttentionTensor<T>> {
    if logits.as_slice().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN logit passed to softmax".into()));
    }
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(AttentionTensor::from_softmax(out))
}

fn check_qkv<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<()> {
    if q.shape() != k.shape() || k.rows() != v.rows() {
        return Err(dim_err!("Q {:?}, K {:?}, V {:?} are inconsistent", q.shape(), k.shape(), v.shape()));
    }
    Ok(())
}

/// Reference single-head attention with an optional dense `S×S` bias.
pub fn attend_naive<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    dense_bias: Option<&Matrix<T>>,
) -> Result<Matrix<T>> {
    check_qkv(q, k, v)?;
    let mut logits = compute_logits(q, k, q.cols())?;
    if let Some(b) = dense_bias {
        if b.shape() != logits.shape() {
            return Err(dim_err!("bias {:?} vs logits {:?}", b.shape(), logits.shape()));
        }
        logits.add_assign(b);
    }
    let probs = softmax_rows(&logits)?;
    matmul(probs.matrix(), v)
}

/// Single-head attention that adds the block bias inside the row softmax.
///
/// When `probs_out` is given, the post-softmax weights are written into it.
pub fn attend_fused<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    bias: Option<&BiasSpec<T>>,
    mut probs_out: Option<&mut Matrix<T>>,
) -> Result<Matrix<T>> {
    check_qkv(q, k, v)?;
    let (s, d) = q.shape();
    if let Some(b) = bias {
        if b.len() != s || b.key_prefix_len > s {
            return Err(dim_err!("bias over {} tokens (prefix {}) vs {s} tokens", b.len(), b.key_prefix_len));
        }
    }
    if let Some(p) = probs_out.as_deref() {
        if p.shape() != (s, s) {
            return Err(dim_err!("probability buffer {:?} vs {s} tokens", p.shape()));
        }
    }
    let scale = logit_scale::<T>(d);
    let kt = k.transpose();
    let dv = v.cols();
    let mut out = Matrix::zeros(s, dv);
    let mut row = vec![T::zero(); s];
    for i in 0..s {
        row.iter_mut().for_each(|r| *r = T::zero());
        for (c, &qc) in q.row(i).iter().enumerate() {
            for (r, &kc) in row.iter_mut().zip(kt.row(c)) {
                *r += qc * kc;
            }
        }
        for r in row.iter_mut() {
            *r *= scale;
        }
        if let Some(b) = bias {
            let add = b.per_query_scale[i];
            if add != T::zero() {
                for r in &mut row[..b.key_prefix_len] {
                    *r += add;
                }
            }
        }
        if row.iter().any(|r| r.is_nan()) {
            return Err(Error::Numeric(format!("NaN logit in query row {i}")));
        }
        softmax_in_place(&mut row);
        let out_row = out.row_mut(i);
        for (j, &p) in row.iter().enumerate() {
            for (o, &vj) in out_row.iter_mut().zip(v.row(j)) {
                *o += p * vj;
            }
        }
        if let Some(p) = probs_out.as_deref_mut() {
            p.row_mut(i).copy_from_slice(&row);
        }
    }
    Ok(out)
}

/// Multi-head attention over `S × (heads·d_h)` projections.
///
/// Head `h` uses columns `[h·d_h, (h+1)·d_h)`. Every head receives the same
/// bias. When `capture` is given and enabled, each head's weights are recorded.
pub fn attend<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    bias: Option<&BiasSpec<T>>,
    config: &AttentionConfig,
    mut capture: Option<CaptureSite<'_, T>>,
) -> Result<Matrix<T>> {
    check_qkv(q, k, v)?;
    let width = config.model_width();
    if q.cols() != width || v.cols() != width {
        return Err(dim_err!("projections have {} columns, config expects {width}", q.cols()));
    }
    let s = q.rows();
    let dh = config.head_dim;
    let recording = config.capture_enabled && capture.as_ref().is_some_and(|c| c.sink.is_enabled());
    let mut out = Matrix::zeros(s, width);
    let mut probs = if recording { Some(Matrix::zeros(s, s)) } else { None };
    for h in 0..config.num_heads {
        let (qh, kh, vh) = (q.column_block(h * dh, dh), k.column_block(h * dh, dh), v.column_block(h * dh, dh));
        let oh = attend_fused(&qh, &kh, &vh, bias, probs.as_mut())?;
        out.set_column_block(h * dh, &oh);
        if let (Some(p), Some(site)) = (probs.as_ref(), capture.as_mut()) {
            site.record(h, &AttentionTensor::from_softmax(p.clone()))?;
        }
    }
    Ok(out)
}

/// Multi-head attention that also returns every head's weights, for backpropagation.
pub fn attend_with_probs<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    bias: Option<&BiasSpec<T>>,
    config: &AttentionConfig,
) -> Result<(Matrix<T>, Vec<AttentionTensor<T>>)> {
    check_qkv(q, k, v)?;
    let width = config.model_width();
    if q.cols() != width || v.cols() != width {
        return Err(dim_err!("projections have {} columns, config expects {width}", q.cols()));
    }
    let s = q.rows();
    let dh = config.head_dim;
    let mut out = Matrix::zeros(s, width);
    let mut all = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let mut p = Matrix::zeros(s, s);
        let (qh, kh, vh) = (q.column_block(h * dh, dh), k.column_block(h * dh, dh), v.column_block(h * dh, dh));
        let oh = attend_fused(&qh, &kh, &vh, bias, Some(&mut p))?;
        out.set_column_block(h * dh, &oh);
        all.push(AttentionTensor::from_softmax(p));
    }
    Ok((out, all))
}
