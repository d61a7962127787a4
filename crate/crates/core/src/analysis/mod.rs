//! Attention and motion measurements.
//!
//! Token-level attention is reduced to an `F×F` frame matrix whose entry
//! `[a, b]` is the average fraction of attention mass a query token of frame
//! `a` assigns to the keys of frame `b`. Frame matrices feed difference maps,
//! the Jensen-Shannon attention distance and the γ sweep.

pub mod export;
mod sweep;

pub use sweep::{gamma_sweep, t2v_attention, SampleMetrics, SweepConfig, SweepResult, SweepRow, DEFAULT_SWEEP_GAMMAS, THREADS_ENV};

use serde::Serialize;

use crate::attention::{check_row_stochastic, AttentionCapture, AttentionTensor};
use crate::error::{dim_err, Error, Result};
use crate::latent::VideoLatent;
use crate::layout::TokenLayout;
use crate::scalar::Scalar;

/// Row-stochastic `F×F` frame-to-frame attention.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameAttentionMatrix {
    frames: usize,
    values: Vec<f64>,
    /// Number of token-level matrices averaged into this one.
    pub sources: usize,
}

impl FrameAttentionMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let frames = rows.len();
        if rows.iter().any(|r| r.len() != frames) {
            return Err(dim_err!("frame attention rows must all have length {frames}"));
        }
        Ok(Self { frames, values: rows.into_iter().flatten().collect(), sources: 1 })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.frames + b]
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.values[a * self.frames..(a + 1) * self.frames]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mass each query frame puts on the reference frame, `Ā[a, 0]`.
    pub fn reference_mass(&self) -> Vec<f64> {
        (0..self.frames).map(|a| self.get(a, 0)).collect()
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.frames != other.frames {
            return Err(dim_err!("frame matrices over {} and {} frames", self.frames, other.frames));
        }
        Ok(())
    }
}

/// Signed `F×F` matrix, e.g. an I2V minus T2V difference map.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DifferenceMap {
    pub frames: usize,
    pub values: Vec<f64>,
}

impl DifferenceMap {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.frames + b]
    }
}

/// `Ā[a,b] = (1/|I_a|)·Σ_{i∈I_a} Σ_{j∈I_b} A[i,j]`.
pub fn aggregate_frame_attention<T: Scalar>(a: &AttentionTensor<T>, layout: &TokenLayout) -> Result<FrameAttentionMatrix> {
    let m = a.matrix();
    if m.rows() != layout.token_count() {
        return Err(dim_err!("attention over {} tokens vs layout of {}", m.rows(), layout.token_count()));
    }
    check_row_stochastic(m, 1e-4)?;
    let (frames, n) = (layout.frames(), layout.frame_size());
    let mut values = vec![0.0f64; frames * frames];
    for i in 0..m.rows() {
        let fa = i / n;
        let row = m.row(i);
        for fb in 0..frames {
            let s: f64 = row[fb * n..(fb + 1) * n].iter().map(|v| v.as_f64()).sum();
            values[fa * frames + fb] += s;
        }
    }
    let inv = 1.0 / n as f64;
    values.iter_mut().for_each(|v| *v *= inv);
    Ok(FrameAttentionMatrix { frames, values, sources: 1 })
}

/// Element-wise mean of frame matrices.
pub fn mean_frame_attention<'a>(mats: impl IntoIterator<Item = &'a FrameAttentionMatrix>) -> Result<FrameAttentionMatrix> {
    let mut iter = mats.into_iter();
    let first = iter.next().ok_or_else(|| Error::Validation("no frame matrices to average".into()))?;
    let mut acc = first.values.clone();
    let mut count = 1usize;
    let mut sources = first.sources;
    for m in iter {
        first.check_same_shape(m)?;
        acc.iter_mut().zip(&m.values).for_each(|(a, b)| *a += b);
        count += 1;
        sources += m.sources;
    }
    acc.iter_mut().for_each(|v| *v /= count as f64);
    Ok(FrameAttentionMatrix { frames: first.frames, values: acc, sources })
}

/// Mean frame matrix over the records of the first `step_fraction` of steps.
///
/// With `N` total steps the window is steps `1..=ceil(step_fraction·N)`, so
/// any positive fraction keeps at least the first step. `N` is the run length
/// recorded by the sampler, or the largest captured step otherwise.
pub fn average_captures<T: Scalar>(capture: &AttentionCapture<T>, step_fraction: f64) -> Result<FrameAttentionMatrix> {
    if capture.is_empty() {
        return Err(Error::Validation("capture holds no records".into()));
    }
    let total = capture
        .total_steps()
        .unwrap_or_else(|| capture.records().iter().map(|r| r.step).max().unwrap_or(0));
    let last = (step_fraction * total as f64 - 1e-9).ceil().max(0.0) as usize;
    let frames: Vec<FrameAttentionMatrix> = capture
        .records()
        .iter()
        .filter(|r| r.step <= last)
        .map(|r| r.frames(capture.layout()))
        .collect::<Result<_>>()?;
    if frames.is_empty() {
        return Err(Error::Validation(format!(
            "no records within the first {step_fraction} of {total} steps"
        )));
    }
    mean_frame_attention(&frames)
}

/// `A_i2v − A_t2v`.
pub fn attention_difference(a_i2v: &FrameAttentionMatrix, a_t2v: &FrameAttentionMatrix) -> Result<DifferenceMap> {
    a_i2v.check_same_shape(a_t2v)?;
    let values = a_i2v.values.iter().zip(&a_t2v.values).map(|(a, b)| a - b).collect();
    Ok(DifferenceMap { frames: a_i2v.frames, values })
}

/// `|A_mod[a,0] − A_base[a,0]|` for every non-reference query frame `a`.
pub fn reference_attention_delta(a_mod: &FrameAttentionMatrix, a_base: &FrameAttentionMatrix) -> Result<Vec<f64>> {
    a_mod.check_same_shape(a_base)?;
    Ok((1..a_mod.frames).map(|a| (a_mod.get(a, 0) - a_base.get(a, 0)).abs()).collect())
}

fn normalized(p: &[f64], name: &str) -> Result<Vec<f64>> {
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Validation(format!("{name} has a negative or NaN entry {v}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(Error::Validation(format!("{name} sums to {sum}, not 1")));
    }
    Ok(p.iter().map(|v| v / sum).collect())
}

/// Jensen-Shannon divergence in nats, `½KL(P‖M) + ½KL(Q‖M)` with `M = ½(P+Q)`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(dim_err!("distributions of length {} and {}", p.len(), q.len()));
    }
    let (p, q) = (normalized(p, "P")?, normalized(q, "Q")?);
    let kl_to_mid = |x: f64, m: f64| if x > 0.0 { x * (x / m).ln() } else { 0.0 };
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(&q) {
        let m = 0.5 * (pi + qi);
        total += 0.5 * kl_to_mid(pi, m) + 0.5 * kl_to_mid(qi, m);
    }
    Ok(total.clamp(0.0, std::f64::consts::LN_2))
}

/// Mean JSD between matching non-reference query rows of the two matrices.
pub fn t2v_i2v_distance(a_i2v: &FrameAttentionMatrix, a_t2v: &FrameAttentionMatrix) -> Result<f64> {
    a_i2v.check_same_shape(a_t2v)?;
    let f = a_i2v.frames;
    if f < 2 {
        return Err(Error::Validation("attention distance needs at least two frames".into()));
    }
    let mut sum = 0.0;
    for a in 1..f {
        sum += jsd(a_i2v.row(a), a_t2v.row(a))?;
    }
    Ok(sum / (f - 1) as f64)
}

/// Nominal pixel range used to normalize frame differences.
pub const PIXEL_RANGE: f64 = 1.0;

/// Mean absolute difference between consecutive frames, divided by the pixel
/// range and clipped to `[0, 1]`.
pub fn dynamic_degree_proxy<T: Scalar>(video: &VideoLatent<T>) -> Result<f64> {
    let f = video.frames();
    if f < 2 {
        return Err(Error::Validation("dynamic degree needs at least two frames".into()));
    }
    let mut total = 0.0;
    for a in 1..f {
        let (prev, cur) = (video.frame(a - 1), video.frame(a));
        let d: f64 = prev.iter().zip(cur).map(|(x, y)| (y.as_f64() - x.as_f64()).abs()).sum();
        total += d / cur.len() as f64;
    }
    Ok((total / (f - 1) as f64 / PIXEL_RANGE).clamp(0.0, 1.0))
}

/// Mean absolute second temporal difference; small values mean smooth motion.
pub fn temporal_smoothness<T: Scalar>(video: &VideoLatent<T>) -> f64 {
    let f = video.frames();
    if f < 3 {
        return 0.0;
    }
    let mut total = 0.0;
    for a in 2..f {
        let (x0, x1, x2) = (video.frame(a - 2), video.frame(a - 1), video.frame(a));
        let d: f64 = (0..x0.len())
            .map(|i| (x2[i].as_f64() - 2.0 * x1[i].as_f64() + x0[i].as_f64()).abs())
            .sum();
        total += d / x0.len() as f64;
    }
    total / (f - 2) as f64
}

/// Mean squared error between frame 0 of `video` and the reference image.
pub fn reference_fidelity<T: Scalar>(video: &VideoLatent<T>, reference: &[T]) -> Result<f64> {
    let f0 = video.frame(0);
    if f0.len() != reference.len() {
        return Err(dim_err!("frame of {} values vs reference of {}", f0.len(), reference.len()));
    }
    let se: f64 = f0.iter().zip(reference).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok(se / f0.len() as f64)
}
