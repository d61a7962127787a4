//! Reference-frame logit modulation.
//!
//! For a non-reference query token `i` and a reference-frame key token `j`
//! the logit becomes `L[i,j] - γ·φ(f(i))`; every other logit is untouched.
//! Because reference keys form the prefix `[0, H·W)` of the token order, the
//! bias is stored as one scale per query row plus that prefix length.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::layout::TokenLayout;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Frame-wise schedule φ scaling the modulation per query frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Uniform,
    Linear,
    Log,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Uniform, ScheduleKind::Linear, ScheduleKind::Log];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Uniform => "uniform",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Log => "log",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ScheduleKind::Uniform),
            "linear" => Ok(ScheduleKind::Linear),
            "log" => Ok(ScheduleKind::Log),
            other => Err(Error::Config(format!(
                "unknown schedule {other:?}, expected uniform | linear | log"
            ))),
        }
    }
}

/// Which classifier-free guidance branches receive the modulated attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchPolicy {
    #[default]
    ConditionalOnly,
    BothBranches,
}

impl BranchPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            BranchPolicy::ConditionalOnly => "conditional_only",
            BranchPolicy::BothBranches => "both_branches",
        }
    }
}

impl fmt::Display for BranchPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BranchPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditional_only" => Ok(BranchPolicy::ConditionalOnly),
            "both_branches" => Ok(BranchPolicy::BothBranches),
            other => Err(Error::Config(format!(
                "unknown branch policy {other:?}, expected conditional_only | both_branches"
            ))),
        }
    }
}

/// The complete set of modulation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulationConfig {
    /// Strength γ. Positive values weaken reference-frame attention, negative values strengthen it.
    pub gamma: f64,
    /// Fraction of initial sampling steps during which modulation is active.
    pub lambda: f64,
    pub schedule: ScheduleKind,
    pub branch_policy: BranchPolicy,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            gamma: 0.6,
            lambda: 0.2,
            schedule: ScheduleKind::Uniform,
            branch_policy: BranchPolicy::ConditionalOnly,
        }
    }
}

impl ModulationConfig {
    /// A configuration that never changes any logit.
    pub fn disabled() -> Self {
        Self { gamma: 0.0, lambda: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be finite, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Weight φ(f) of query frame `frame` among `frames` frames.
pub fn schedule_weight(kind: ScheduleKind, frame: usize, frames: usize) -> Result<f64> {
    if frame >= frames {
        return Err(Error::Range(format!("frame {frame} outside [0, {frames})")));
    }
    match kind {
        ScheduleKind::Uniform => Ok(1.0),
        ScheduleKind::Linear | ScheduleKind::Log if frames < 2 => Err(Error::UndefinedSchedule(
            format!("{kind} schedule needs at least two frames, got {frames}"),
        )),
        ScheduleKind::Linear => Ok(frame as f64 / (frames - 1) as f64),
        ScheduleKind::Log => Ok((1.0 + frame as f64).ln() / (frames as f64).ln()),
    }
}

/// Whether modulation is active at 1-based step `step` of `total_steps`.
///
/// The gate compares sampling progress `step / total_steps` against `lambda`
/// with a strict inequality, so `lambda = 0.2` over 40 steps covers steps 1..=7.
pub fn is_active(step: usize, total_steps: usize, lambda: f64) -> bool {
    debug_assert!(step >= 1 && step <= total_steps);
    (step as f64) / (total_steps as f64) < lambda
}

/// Block-structured additive logit bias.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasSpec<T> {
    /// `-γ·φ(f(i))` for non-reference queries, exactly zero for reference queries.
    pub per_query_scale: Vec<T>,
    /// Number of leading key columns (the reference frame) the scale applies to.
    pub key_prefix_len: usize,
}

impl<T: Scalar> BiasSpec<T> {
    pub fn zeros(layout: &TokenLayout) -> Self {
        Self { per_query_scale: vec![T::zero(); layout.token_count()], key_prefix_len: layout.frame_size() }
    }

    pub fn len(&self) -> usize {
        self.per_query_scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_query_scale.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.per_query_scale.iter().all(|&v| v == T::zero())
    }

    /// Bias value added to logit `(query, key)`.
    #[inline]
    pub fn value(&self, query: usize, key: usize) -> T {
        if key < self.key_prefix_len {
            self.per_query_scale[query]
        } else {
            T::zero()
        }
    }

    /// Expands to the dense `S×S` matrix.
    pub fn to_dense(&self) -> Matrix<T> {
        let s = self.len();
        Matrix::from_fn(s, s, |i, j| self.value(i, j))
    }
}

/// Builds the modulation bias for `layout` at strength `gamma` under `kind`.
pub fn build_bias<T: Scalar>(layout: &TokenLayout, gamma: f64, kind: ScheduleKind) -> Result<BiasSpec<T>> {
    let frames = layout.frames();
    let mut per_frame = vec![T::zero(); frames];
    for (f, w) in per_frame.iter_mut().enumerate().skip(1) {
        let phi = schedule_weight(kind, f, frames)?;
        // 0.0 * -γ would be -0.0; keep the zero-strength bias an exact +0.0.
        *w = if gamma == 0.0 || phi == 0.0 { T::zero() } else { T::of(-gamma * phi) };
    }
    let per_query_scale = (0..layout.token_count())
        .map(|i| per_frame[i / layout.frame_size()])
        .collect();
    Ok(BiasSpec { per_query_scale, key_prefix_len: layout.frame_size() })
}

/// Adds the bias to a logit matrix.
pub fn modulate_logits<T: Scalar>(logits: &Matrix<T>, spec: &BiasSpec<T>) -> Result<Matrix<T>> {
    let s = spec.len();
    if logits.shape() != (s, s) {
        return Err(dim_err!("logits {:?} do not match a bias over {s} tokens", logits.shape()));
    }
    let mut out = logits.clone();
    for i in 0..s {
        let scale = spec.per_query_scale[i];
        if scale == T::zero() {
            continue;
        }
        for v in &mut out.row_mut(i)[..spec.key_prefix_len] {
            *v += scale;
        }
    }
    Ok(out)
}
