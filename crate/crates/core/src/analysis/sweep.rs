//! γ sweep: sample every (γ, seed) grid point, then reduce to one row per γ.

use rayon::prelude::*;
use serde::Serialize;

use super::{average_captures, dynamic_degree_proxy, mean_frame_attention, reference_fidelity, t2v_i2v_distance, temporal_smoothness, FrameAttentionMatrix};
use crate::attention::{AttentionCapture, CaptureMode};
use crate::error::{Error, Result};
use crate::latent::{Frame, VideoLatent};
use crate::model::{generate_sprite_video, toy_decode, toy_encode, SpriteDatasetConfig, MOVING_CLASS};
use crate::modulation::ModulationConfig;
use crate::sampler::{sample, Condition, SamplerConfig, VelocityModel};
use crate::scalar::Scalar;

pub const DEFAULT_SWEEP_GAMMAS: [f64; 5] = [-2.0, -1.0, 0.0, 0.6, 1.0];

/// Environment variable holding the worker thread count for sweeps.
pub const THREADS_ENV: &str = "DYMOS_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    pub gammas: Vec<f64>,
    /// Each seed picks both the reference sprite and the sampling noise.
    pub seeds: Vec<u64>,
    /// `seed` is replaced per grid point.
    pub sampler: SamplerConfig,
    /// `gamma` is replaced per grid point.
    pub modulation: ModulationConfig,
    pub cond: Condition,
    /// Fraction of early steps averaged into the frame attention matrix.
    pub attention_window: f64,
    /// γ whose attention serves as the comparator for D(γ) when no external
    /// matrix is supplied.
    pub reference_gamma: f64,
    pub dataset: SpriteDatasetConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            gammas: DEFAULT_SWEEP_GAMMAS.to_vec(),
            seeds: (0..8).collect(),
            sampler: SamplerConfig::default(),
            modulation: ModulationConfig::default(),
            cond: Condition::Class(MOVING_CLASS),
            attention_window: 0.1,
            reference_gamma: 0.0,
            dataset: SpriteDatasetConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one gamma and one seed".into()));
        }
        if let Some(g) = self.gammas.iter().find(|g| !g.is_finite()) {
            return Err(Error::Config(format!("sweep gamma {g} is not finite")));
        }
        if !(self.attention_window > 0.0 && self.attention_window <= 1.0) {
            return Err(Error::Config(format!("attention window {} outside (0, 1]", self.attention_window)));
        }
        self.sampler.validate()?;
        self.dataset.validate()
    }

    /// Reference image (pixels of frame 0) for a seed.
    pub fn reference_pixels<T: Scalar>(&self, seed: u64) -> Result<Frame<T>> {
        let class = match self.cond {
            Condition::Class(c) if c <= MOVING_CLASS => c,
            _ => MOVING_CLASS,
        };
        Ok(generate_sprite_video::<T>(seed, class, &self.dataset)?.pixels.frame_owned(0))
    }
}

/// Metrics of one sampled video.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub seed: u64,
    pub dd_proxy: f64,
    pub ref_mse: f64,
    pub smoothness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub gamma: f64,
    /// Seed mean of the dynamic degree proxy.
    pub dd_proxy: f64,
    /// Largest frame-0 MSE over seeds.
    pub ref_mse: f64,
    pub d_gamma: f64,
    /// `Ā[a, 0]` for `a = 1..F`.
    pub refmass: Vec<f64>,
    pub attention: FrameAttentionMatrix,
    pub samples: Vec<SampleMetrics>,
}

impl SweepRow {
    pub fn dd_median(&self) -> f64 {
        let mut v: Vec<f64> = self.samples.iter().map(|s| s.dd_proxy).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Matrix D(γ) was measured against.
    pub comparator: FrameAttentionMatrix,
}

impl SweepResult {
    pub fn row(&self, gamma: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.gamma == gamma)
    }

    pub fn csv_header(&self) -> String {
        let k = self.rows.first().map_or(0, |r| r.refmass.len());
        let mut cols = vec!["gamma".to_string(), "dd_proxy".into(), "ref_mse".into(), "d_gamma".into()];
        cols.extend((1..=k).map(|a| format!("refmass_f{a}")));
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for r in &self.rows {
            let mut cells = vec![r.gamma.to_string(), r.dd_proxy.to_string(), r.ref_mse.to_string(), r.d_gamma.to_string()];
            cells.extend(r.refmass.iter().map(f64::to_string));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// One line per (γ, seed) with the per-video metrics.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("gamma,seed,dd_proxy,ref_mse,smoothness\n");
        for r in &self.rows {
            for s in &r.samples {
                out.push_str(&format!("{},{},{},{},{}\n", r.gamma, s.seed, s.dd_proxy, s.ref_mse, s.smoothness));
            }
        }
        out
    }
}

struct PointOutput {
    metrics: SampleMetrics,
    attention: FrameAttentionMatrix,
}

fn run_point<T: Scalar, M: VelocityModel<T> + ?Sized>(model: &M, cfg: &SweepConfig, gamma: f64, seed: u64) -> Result<PointOutput> {
    let reference: Frame<T> = cfg.reference_pixels(seed)?;
    let (h, w, c) = (reference.height, reference.width, reference.channels);
    let ref_latent = toy_encode(&VideoLatent::from_vec(1, h, w, c, reference.data.clone())?).frame_owned(0);
    let scfg = SamplerConfig { seed, ..cfg.sampler };
    let mcfg = ModulationConfig { gamma, ..cfg.modulation };
    let mut capture = AttentionCapture::new(model.layout(), CaptureMode::FrameAggregate);
    let out = sample(model, &ref_latent, cfg.cond, &scfg, &mcfg, Some(&mut capture))?;
    let pixels = toy_decode(&out.latent);
    Ok(PointOutput {
        metrics: SampleMetrics {
            seed,
            dd_proxy: dynamic_degree_proxy(&pixels)?,
            ref_mse: reference_fidelity(&pixels, &reference.data)?,
            smoothness: temporal_smoothness(&pixels),
        },
        attention: average_captures(&capture, cfg.attention_window)?,
    })
}

/// Mean early-step frame attention of a reference-free (T2V-style) model,
/// sampled without modulation or frame-0 replacement over the sweep seeds.
pub fn t2v_attention<T: Scalar, M: VelocityModel<T> + ?Sized>(model: &M, cfg: &SweepConfig) -> Result<FrameAttentionMatrix> {
    cfg.validate()?;
    let scfg = SamplerConfig { replace_reference: false, ..cfg.sampler };
    let mats: Vec<FrameAttentionMatrix> = thread_pool()?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let reference: Frame<T> = cfg.reference_pixels(seed)?;
                let (h, w, c) = (reference.height, reference.width, reference.channels);
                let ref_latent = toy_encode(&VideoLatent::from_vec(1, h, w, c, reference.data)?).frame_owned(0);
                let mut capture = AttentionCapture::new(model.layout(), CaptureMode::FrameAggregate);
                sample(model, &ref_latent, cfg.cond, &SamplerConfig { seed, ..scfg }, &ModulationConfig::disabled(), Some(&mut capture))?;
                average_captures(&capture, cfg.attention_window)
            })
            .collect::<Result<_>>()
    })?;
    mean_frame_attention(&mats)
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("cannot start sweep workers: {e}")))
}

/// Runs the sweep. D(γ) compares each γ's mean frame attention with
/// `comparator` when given (e.g. a T2V model's), otherwise with the
/// `reference_gamma` run.
pub fn gamma_sweep<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    cfg: &SweepConfig,
    comparator: Option<&FrameAttentionMatrix>,
) -> Result<SweepResult> {
    cfg.validate()?;
    let mut gammas = cfg.gammas.clone();
    let extra_reference = comparator.is_none() && !gammas.contains(&cfg.reference_gamma);
    if extra_reference {
        gammas.push(cfg.reference_gamma);
    }
    let grid: Vec<(usize, u64)> = (0..gammas.len()).flat_map(|g| cfg.seeds.iter().map(move |&s| (g, s))).collect();
    let points: Vec<PointOutput> =
        thread_pool()?.install(|| grid.par_iter().map(|&(g, s)| run_point(model, cfg, gammas[g], s)).collect::<Result<_>>())?;

    let per_gamma = cfg.seeds.len();
    let mut rows = Vec::with_capacity(gammas.len());
    for (g, chunk) in points.chunks(per_gamma).enumerate() {
        let attention = mean_frame_attention(chunk.iter().map(|p| &p.attention))?;
        let samples: Vec<SampleMetrics> = chunk.iter().map(|p| p.metrics.clone()).collect();
        rows.push(SweepRow {
            gamma: gammas[g],
            dd_proxy: samples.iter().map(|s| s.dd_proxy).sum::<f64>() / per_gamma as f64,
            ref_mse: samples.iter().map(|s| s.ref_mse).fold(0.0, f64::max),
            d_gamma: 0.0,
            refmass: attention.reference_mass()[1..].to_vec(),
            attention,
            samples,
        });
    }
    let comparator = match comparator {
        Some(m) => m.clone(),
        None => rows.iter().find(|r| r.gamma == cfg.reference_gamma).map(|r| r.attention.clone()).expect("reference gamma row"),
    };
    for r in &mut rows {
        r.d_gamma = t2v_i2v_distance(&r.attention, &comparator)?;
    }
    if extra_reference {
        rows.pop();
    }
    Ok(SweepResult { rows, comparator })
}
