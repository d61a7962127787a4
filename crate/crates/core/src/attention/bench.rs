//! Timing of the fused-bias attention kernel against the unbiased one.

use std::time::Instant;

use serde::Serialize;

use super::{attend, attend_naive, AttentionConfig};
use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::modulation::{build_bias, BiasSpec, ScheduleKind};
use crate::rng::{standard_normal_vec, stream_rng, streams};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchConfig {
    /// Token count S; must be a multiple of `frames`.
    pub size: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub frames: usize,
    pub iters: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { size: 512, heads: 4, head_dim: 8, frames: 8, iters: 50, gamma: 0.6, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub median_ms: f64,
    pub p90_ms: f64,
}

impl Timing {
    fn from_samples(mut ms: Vec<f64>) -> Self {
        ms.sort_by(f64::total_cmp);
        let at = |q: f64| ms[((ms.len() - 1) as f64 * q).round() as usize];
        Self { median_ms: at(0.5), p90_ms: at(0.9) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    /// Largest fused-vs-naive output difference over all heads.
    pub max_abs_diff: f64,
    pub unbiased: Timing,
    pub biased: Timing,
    /// `100·(biased median / unbiased median − 1)`.
    pub overhead_pct: f64,
}

impl BenchReport {
    pub fn summary(&self) -> String {
        let c = &self.config;
        format!(
            "S={} heads={} head_dim={} iters={} agreement={:.2e} unbiased median={:.3}ms p90={:.3}ms biased median={:.3}ms p90={:.3}ms overhead={:.2}%",
            c.size,
            c.heads,
            c.head_dim,
            c.iters,
            self.max_abs_diff,
            self.unbiased.median_ms,
            self.unbiased.p90_ms,
            self.biased.median_ms,
            self.biased.p90_ms,
            self.overhead_pct
        )
    }
}

/// Largest difference between multi-head fused attention and per-head naive attention.
pub fn fused_naive_max_diff<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    bias: Option<&BiasSpec<T>>,
    config: &AttentionConfig,
) -> Result<f64> {
    let fused = attend(q, k, v, bias, config, None)?;
    let dense = bias.map(BiasSpec::to_dense);
    let dh = config.head_dim;
    let mut worst = 0.0f64;
    for h in 0..config.num_heads {
        let (qh, kh, vh) = (q.column_block(h * dh, dh), k.column_block(h * dh, dh), v.column_block(h * dh, dh));
        let naive = attend_naive(&qh, &kh, &vh, dense.as_ref())?;
        worst = worst.max(naive.max_abs_diff(&fused.column_block(h * dh, dh)).as_f64());
    }
    Ok(worst)
}

/// Checks agreement within `1e-6`, then times both kernels in alternation.
pub fn run_bench<T: Scalar>(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.iters == 0 || cfg.frames == 0 || !cfg.size.is_multiple_of(cfg.frames) {
        return Err(Error::Config(format!(
            "bench needs iters >= 1 and size {} divisible by frames {}",
            cfg.size, cfg.frames
        )));
    }
    let layout = TokenLayout::new(cfg.frames, 1, cfg.size / cfg.frames)?;
    let att = AttentionConfig::new(cfg.heads, cfg.head_dim)?;
    let width = att.model_width();
    let mut rng = stream_rng(cfg.seed, streams::PROBE);
    let mut rand = || Matrix::from_vec(cfg.size, width, standard_normal_vec::<T, _>(&mut rng, cfg.size * width));
    let (q, k, v) = (rand()?, rand()?, rand()?);
    let bias: BiasSpec<T> = build_bias(&layout, cfg.gamma, ScheduleKind::Uniform)?;

    let max_abs_diff = fused_naive_max_diff(&q, &k, &v, Some(&bias), &att)?.max(fused_naive_max_diff(&q, &k, &v, None, &att)?);
    if !(max_abs_diff <= 1e-6) {
        return Err(Error::Numeric(format!("fused and naive attention differ by {max_abs_diff:e}")));
    }

    let time = |b: Option<&BiasSpec<T>>| -> Result<f64> {
        let start = Instant::now();
        std::hint::black_box(attend(&q, &k, &v, b, &att, None)?);
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..2 {
        time(None)?;
        time(Some(&bias))?;
    }
    let (mut plain, mut biased) = (Vec::with_capacity(cfg.iters), Vec::with_capacity(cfg.iters));
    for _ in 0..cfg.iters {
        plain.push(time(None)?);
        biased.push(time(Some(&bias))?);
    }
    let (unbiased, biased) = (Timing::from_samples(plain), Timing::from_samples(biased));
    Ok(BenchReport {
        config: *cfg,
        max_abs_diff,
        unbiased,
        biased,
        overhead_pct: 100.0 * (biased.median_ms / unbiased.median_ms - 1.0),
    })
}
