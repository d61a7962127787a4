//! Flow-matching Euler sampling with classifier-free guidance and
//! step-gated reference-frame modulation.
//!
//! Time runs from `t = 1` (noise) to `t = 0` (data) on the uniform grid
//! `t_k = 1 − k/N`. Step `i` (1-based) integrates from `t_{i−1}` to `t_i` and
//! is modulated when its progress `i/N` is below λ.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionCapture;
use crate::error::{dim_err, Error, Result};
use crate::latent::{Frame, VideoLatent};
use crate::layout::TokenLayout;
use crate::model::ForwardProbe;
use crate::modulation::{build_bias, is_active, BiasSpec, BranchPolicy, ModulationConfig};
use crate::rng::{standard_normal_vec, stream_rng, streams};
use crate::scalar::Scalar;

/// Conditioning signal: a class id, or the null condition of the unconditional branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    /// Guidance scale ω ≥ 1.
    pub guidance_scale: f64,
    pub seed: u64,
    /// Overwrite frame 0 with the reference latent after every update.
    pub replace_reference: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: 20, guidance_scale: 3.5, seed: 0, replace_reference: true }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("sampler.num_steps must be at least 1".into()));
        }
        if self.guidance_scale < 1.0 || !self.guidance_scale.is_finite() {
            return Err(Error::Config(format!("guidance scale must be finite and >= 1, got {}", self.guidance_scale)));
        }
        Ok(())
    }
}

/// A velocity predictor `v(z_t, t, c, z_ref)` whose self-attention accepts a logit bias.
pub trait VelocityModel<T: Scalar>: Sync {
    fn layout(&self) -> TokenLayout;

    fn latent_channels(&self) -> usize;

    fn velocity(
        &self,
        z_t: &VideoLatent<T>,
        t: T,
        cond: Condition,
        z_ref: &Frame<T>,
        bias: Option<&BiasSpec<T>>,
        probe: &mut ForwardProbe<'_, T>,
    ) -> Result<VideoLatent<T>>;
}

/// `(1 − t)·z0 + t·eps`.
pub fn interpolate<T: Scalar>(z0: &VideoLatent<T>, eps: &VideoLatent<T>, t: T) -> Result<VideoLatent<T>> {
    if !(t.as_f64() >= 0.0 && t.as_f64() <= 1.0) {
        return Err(Error::Range(format!("interpolation time {t} outside [0, 1]")));
    }
    let s = T::one() - t;
    z0.zip_with(eps, |a, b| s * a + t * b)
}

/// `eps − z0`, the time derivative of [`interpolate`].
pub fn target_velocity<T: Scalar>(z0: &VideoLatent<T>, eps: &VideoLatent<T>) -> Result<VideoLatent<T>> {
    z0.zip_with(eps, |a, b| b - a)
}

/// `v_uncond + ω·(v_cond − v_uncond)`; returns `v_cond` unchanged when `ω = 1`.
pub fn cfg_combine<T: Scalar>(v_uncond: &VideoLatent<T>, v_cond: &VideoLatent<T>, omega: f64) -> Result<VideoLatent<T>> {
    v_uncond.same_shape(v_cond)?;
    if omega == 1.0 {
        return Ok(v_cond.clone());
    }
    let w = T::of(omega);
    v_uncond.zip_with(v_cond, |u, c| u + w * (c - u))
}

/// Euler update `z + (t_next − t)·v`.
pub fn scheduler_step<T: Scalar>(z: &VideoLatent<T>, v: &VideoLatent<T>, t: T, t_next: T) -> Result<VideoLatent<T>> {
    let dt = t_next - t;
    z.zip_with(v, |a, b| a + dt * b)
}

/// Overwrites frame 0 of `z` with the reference latent.
pub fn replace_reference_latent<T: Scalar>(z: &mut VideoLatent<T>, z_ref: &Frame<T>) -> Result<()> {
    if (z_ref.height, z_ref.width, z_ref.channels) != (z.height(), z.width(), z.channels()) {
        return Err(dim_err!(
            "reference frame {}x{}x{} vs latent frame {}x{}x{}",
            z_ref.height,
            z_ref.width,
            z_ref.channels,
            z.height(),
            z.width(),
            z.channels()
        ));
    }
    if z.frames() > 0 {
        z.frame_mut(0).copy_from_slice(&z_ref.data);
    }
    Ok(())
}

/// The `N + 1` times `1, 1 − 1/N, …, 0`.
pub fn time_grid(num_steps: usize) -> Vec<f64> {
    (0..=num_steps).map(|k| 1.0 - k as f64 / num_steps as f64).collect()
}

/// What happened at one sampling step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    /// 1-based step index.
    pub step: usize,
    pub t: f64,
    pub t_next: f64,
    pub modulated: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CallCounts {
    pub plain: usize,
    pub modulated: usize,
}

#[derive(Debug, Clone)]
pub struct SampleOutput<T> {
    pub latent: VideoLatent<T>,
    pub steps: Vec<StepRecord>,
    /// Attention calls made by the unconditional branch.
    pub uncond_calls: CallCounts,
    /// Attention calls made by the conditional branch.
    pub cond_calls: CallCounts,
}

impl<T> SampleOutput<T> {
    pub fn modulated_steps(&self) -> Vec<usize> {
        self.steps.iter().filter(|s| s.modulated).map(|s| s.step).collect()
    }
}

/// Non-finite activations inside the model count as divergence at `step`.
fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(_) => Error::SamplerDivergence { step },
        other => other,
    }
}

fn initial_noise<T: Scalar, M: VelocityModel<T> + ?Sized>(model: &M, seed: u64) -> Result<VideoLatent<T>> {
    let l = model.layout();
    let c = model.latent_channels();
    let mut rng = stream_rng(seed, streams::INIT_NOISE);
    VideoLatent::from_vec(l.frames(), l.height(), l.width(), c, standard_normal_vec(&mut rng, l.token_count() * c))
}

/// Generates a latent video from `ref_frame` under `cond`.
///
/// The unconditional branch sees modulated attention only under
/// [`BranchPolicy::BothBranches`]. When `capture` is given, the conditional
/// branch's attention is recorded at every step.
pub fn sample<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    ref_frame: &Frame<T>,
    cond: Condition,
    scfg: &SamplerConfig,
    mcfg: &ModulationConfig,
    mut capture: Option<&mut AttentionCapture<T>>,
) -> Result<SampleOutput<T>> {
    scfg.validate()?;
    mcfg.validate()?;
    let n = scfg.num_steps;
    let bias: BiasSpec<T> = build_bias(&model.layout(), mcfg.gamma, mcfg.schedule)?;
    let grid = time_grid(n);
    let mut z = initial_noise(model, scfg.seed)?;
    if scfg.replace_reference {
        replace_reference_latent(&mut z, ref_frame)?;
    }
    if let Some(c) = capture.as_deref_mut() {
        c.set_total_steps(n);
    }
    let mut steps = Vec::with_capacity(n);
    let (mut uncond_calls, mut cond_calls) = (CallCounts::default(), CallCounts::default());
    for i in 1..=n {
        let (t, t_next) = (T::of(grid[i - 1]), T::of(grid[i]));
        let active = is_active(i, n, mcfg.lambda);
        let cond_bias = active.then_some(&bias);
        let uncond_bias = (active && mcfg.branch_policy == BranchPolicy::BothBranches).then_some(&bias);

        let mut probe = ForwardProbe::new();
        let v_uncond = model.velocity(&z, t, Condition::Null, ref_frame, uncond_bias, &mut probe).map_err(|e| diverged(e, i))?;
        uncond_calls.plain += probe.plain_calls;
        uncond_calls.modulated += probe.modulated_calls;

        let mut probe = ForwardProbe::with_capture(capture.as_deref_mut(), i);
        let v_cond = model.velocity(&z, t, cond, ref_frame, cond_bias, &mut probe).map_err(|e| diverged(e, i))?;
        cond_calls.plain += probe.plain_calls;
        cond_calls.modulated += probe.modulated_calls;

        let v = cfg_combine(&v_uncond, &v_cond, scfg.guidance_scale)?;
        z = scheduler_step(&z, &v, t, t_next)?;
        if scfg.replace_reference {
            replace_reference_latent(&mut z, ref_frame)?;
        }
        if !z.is_finite() {
            return Err(Error::SamplerDivergence { step: i });
        }
        steps.push(StepRecord { step: i, t: grid[i - 1], t_next: grid[i], modulated: active });
    }
    Ok(SampleOutput { latent: z, steps, uncond_calls, cond_calls })
}

/// Guided Euler sampling with no modulation logic at all.
pub fn sample_baseline<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    ref_frame: &Frame<T>,
    cond: Condition,
    scfg: &SamplerConfig,
) -> Result<VideoLatent<T>> {
    scfg.validate()?;
    let n = scfg.num_steps;
    let grid = time_grid(n);
    let mut z = initial_noise(model, scfg.seed)?;
    if scfg.replace_reference {
        replace_reference_latent(&mut z, ref_frame)?;
    }
    for i in 1..=n {
        let (t, t_next) = (T::of(grid[i - 1]), T::of(grid[i]));
        let v_uncond = model.velocity(&z, t, Condition::Null, ref_frame, None, &mut ForwardProbe::new()).map_err(|e| diverged(e, i))?;
        let v_cond = model.velocity(&z, t, cond, ref_frame, None, &mut ForwardProbe::new()).map_err(|e| diverged(e, i))?;
        let v = cfg_combine(&v_uncond, &v_cond, scfg.guidance_scale)?;
        z = scheduler_step(&z, &v, t, t_next)?;
        if scfg.replace_reference {
            replace_reference_latent(&mut z, ref_frame)?;
        }
        if !z.is_finite() {
            return Err(Error::SamplerDivergence { step: i });
        }
    }
    Ok(z)
}
