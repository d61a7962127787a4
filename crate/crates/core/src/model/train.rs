//! Flow-matching training with plain SGD, plus a finite-difference gradient check.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{Frame, VideoLatent};
use crate::rng::{indexed_rng, standard_normal_vec, stream_rng, streams};
use crate::sampler::{interpolate, replace_reference_latent, target_velocity, Condition};
use crate::scalar::Scalar;

use super::params::ToyDiTParams;
use super::sprites::SpriteDataset;
use super::{toy_encode, ForwardProbe, ReferenceConditioning, ToyDiT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Steps between loss-curve points.
    pub report_every: usize,
    /// Probability of replacing the class with the null condition.
    pub cond_dropout: f64,
    pub seed: u64,
    /// Size of the fixed held-out batch scored before and after training.
    pub eval_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch_size: 8,
            learning_rate: 0.03,
            report_every: 50,
            cond_dropout: 0.1,
            seed: 0,
            eval_examples: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.report_every == 0 {
            return Err(Error::Config("train.batch_size and train.report_every must be positive".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("train.learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("train.cond_dropout must lie in [0, 1], got {}", self.cond_dropout)));
        }
        Ok(())
    }
}

/// One flow-matching regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<T> {
    /// Clean latent.
    pub z0: VideoLatent<T>,
    pub eps: VideoLatent<T>,
    pub t: T,
    pub cond: Condition,
}

impl<T: Scalar> TrainingExample<T> {
    /// Draws noise, time and condition dropout for `z0` from `rng`.
    pub fn draw<R: Rng>(z0: VideoLatent<T>, cond: Condition, cond_dropout: f64, rng: &mut R) -> Self {
        let eps = VideoLatent::from_vec(
            z0.frames(),
            z0.height(),
            z0.width(),
            z0.channels(),
            standard_normal_vec(rng, z0.len()),
        )
        .expect("same shape");
        let t = T::of(rng.random::<f64>());
        let cond = if rng.random::<f64>() < cond_dropout { Condition::Null } else { cond };
        Self { z0, eps, t, cond }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, mean training loss since the previous point)`.
    pub losses: Vec<(usize, f64)>,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

impl<T: Scalar> ToyDiT<T> {
    fn conditions_on_reference(&self) -> bool {
        self.config.reference != ReferenceConditioning::None
    }

    /// Model input, reference frame and loss-frame offset for an example.
    ///
    /// Reference-conditioned models see the clean reference latent in frame 0,
    /// as they do during sampling, and that frame is excluded from the loss.
    fn prepare(&self, ex: &TrainingExample<T>) -> Result<(VideoLatent<T>, Frame<T>, usize)> {
        let mut z_t = interpolate(&ex.z0, &ex.eps, ex.t)?;
        let z_ref = ex.z0.frame_owned(0);
        let mut first = 0;
        if self.conditions_on_reference() {
            replace_reference_latent(&mut z_t, &z_ref)?;
            if ex.z0.frames() > 1 {
                first = 1;
            }
        }
        Ok((z_t, z_ref, first))
    }

    /// Mean squared error between the predicted and target velocity.
    pub fn example_loss(&self, ex: &TrainingExample<T>) -> Result<T> {
        Ok(self.loss_parts(ex, false)?.0)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, ex: &TrainingExample<T>) -> Result<(T, ToyDiTParams<T>)> {
        let (loss, grad) = self.loss_parts(ex, true)?;
        Ok((loss, grad.expect("requested")))
    }

    fn loss_parts(&self, ex: &TrainingExample<T>, with_grad: bool) -> Result<(T, Option<ToyDiTParams<T>>)> {
        let (z_t, z_ref, first) = self.prepare(ex)?;
        let target = target_velocity(&ex.z0, &ex.eps)?;
        let (pred, cache) = self.run(&z_t, ex.t, ex.cond, &z_ref, None, &mut ForwardProbe::new(), with_grad)?;
        let per_frame = pred.frame_len();
        let start = first * per_frame;
        let count = T::of((pred.len() - start) as f64);
        let mut loss = T::zero();
        let mut d_out = VideoLatent::zeros(pred.frames(), pred.height(), pred.width(), pred.channels());
        let two_over_n = T::of(2.0) / count;
        for (i, ((&p, &y), d)) in pred.as_slice().iter().zip(target.as_slice()).zip(d_out.as_mut_slice()).enumerate() {
            if i < start {
                continue;
            }
            let r = p - y;
            loss += r * r;
            *d = two_over_n * r;
        }
        loss /= count;
        let grad = match cache {
            Some(c) => Some(self.backward(&c, &d_out)?),
            None => None,
        };
        Ok((loss, grad))
    }

    /// Mean loss over a fixed set of examples.
    pub fn mean_loss(&self, examples: &[TrainingExample<T>]) -> Result<f64> {
        let mut total = 0.0;
        for ex in examples {
            total += self.example_loss(ex)?.as_f64();
        }
        Ok(total / examples.len().max(1) as f64)
    }
}

/// Held-out examples drawn from their own stream, identical before and after training.
pub fn eval_examples<T: Scalar>(dataset: &SpriteDataset<T>, cfg: &TrainConfig) -> Vec<TrainingExample<T>> {
    let mut rng = stream_rng(cfg.seed, streams::PROBE);
    (0..cfg.eval_examples)
        .map(|_| {
            let v = &dataset.videos[rng.random_range(0..dataset.len())];
            TrainingExample::draw(toy_encode(&v.pixels), v.condition, 0.0, &mut rng)
        })
        .collect()
}

/// Trains `model` in place with minibatch SGD at a fixed learning rate.
///
/// Deterministic in `cfg.seed`: the batch indices, noise and times of step
/// `s` come from their own indexed stream.
pub fn train<T: Scalar>(model: &mut ToyDiT<T>, dataset: &SpriteDataset<T>, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_progress(model, dataset, cfg, |_, _| {})
}

/// [`train`] with a callback invoked at every loss-curve point.
pub fn train_with_progress<T: Scalar>(
    model: &mut ToyDiT<T>,
    dataset: &SpriteDataset<T>,
    cfg: &TrainConfig,
    mut on_report: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let latents: Vec<VideoLatent<T>> = dataset.videos.iter().map(|v| toy_encode(&v.pixels)).collect();
    let held_out = eval_examples(dataset, cfg);
    let initial_eval_loss = model.mean_loss(&held_out)?;
    let lr = T::of(cfg.learning_rate);
    let inv_batch = T::of(1.0 / cfg.batch_size as f64);
    let mut losses = Vec::new();
    let (mut window, mut window_len) = (0.0f64, 0usize);
    for step in 1..=cfg.steps {
        let mut rng = indexed_rng(cfg.seed, streams::TRAIN_BATCH, step as u64);
        let mut grad = model.params.zeros_like();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..latents.len());
            let ex = TrainingExample::draw(latents[i].clone(), dataset.videos[i].condition, cfg.cond_dropout, &mut rng);
            let (loss, g) = model.loss_and_grad(&ex).map_err(|e| match e {
                Error::Numeric(_) => Error::TrainingDivergence { step },
                other => other,
            })?;
            batch_loss += loss.as_f64();
            grad.add_scaled(&g, inv_batch);
        }
        batch_loss /= cfg.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::TrainingDivergence { step });
        }
        model.params.add_scaled(&grad, -lr);
        if !model.params.is_finite() {
            return Err(Error::TrainingDivergence { step });
        }
        window += batch_loss;
        window_len += 1;
        if step % cfg.report_every == 0 || step == cfg.steps {
            let mean = window / window_len as f64;
            losses.push((step, mean));
            on_report(step, mean);
            window = 0.0;
            window_len = 0;
        }
    }
    let final_eval_loss = model.mean_loss(&held_out)?;
    Ok(TrainReport { losses, initial_eval_loss, final_eval_loss })
}

/// Agreement between backpropagated and central-difference gradients of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub tensor: String,
    pub checked: usize,
    /// `‖g_fd − g_bp‖ / max(‖g_fd‖, ‖g_bp‖)` over the checked entries; 0 when both vanish.
    pub relative_error: f64,
    pub max_abs_gradient: f64,
}

/// Compares backpropagated gradients against central differences with step `h`.
///
/// Tensors with at most `max_entries` entries are checked exhaustively;
/// larger ones on an evenly strided subset of `max_entries` entries.
pub fn gradient_check(model: &ToyDiT<f64>, ex: &TrainingExample<f64>, h: f64, max_entries: usize) -> Result<Vec<GradientCheck>> {
    let (_, grad) = model.loss_and_grad(ex)?;
    let names = model.params.names();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(names.len());
    for (t, name) in names.into_iter().enumerate() {
        let len = grad.tensors()[t].as_slice().len();
        let stride = len.div_ceil(max_entries).max(1);
        let (mut diff2, mut fd2, mut bp2, mut max_abs) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut checked = 0;
        for idx in (0..len).step_by(stride) {
            let orig = probe.params.tensors()[t].as_slice()[idx];
            probe.params.tensors_mut()[t].as_mut_slice()[idx] = orig + h;
            let up = probe.example_loss(ex)?;
            probe.params.tensors_mut()[t].as_mut_slice()[idx] = orig - h;
            let down = probe.example_loss(ex)?;
            probe.params.tensors_mut()[t].as_mut_slice()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let bp = grad.tensors()[t].as_slice()[idx];
            diff2 += (fd - bp) * (fd - bp);
            fd2 += fd * fd;
            bp2 += bp * bp;
            max_abs = max_abs.max(bp.abs());
            checked += 1;
        }
        let denom = fd2.sqrt().max(bp2.sqrt());
        let relative_error = if denom < 1e-14 { 0.0 } else { diff2.sqrt() / denom };
        out.push(GradientCheck { tensor: name, checked, relative_error, max_abs_gradient: max_abs });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SpriteDatasetConfig};

    fn tiny() -> (ModelConfig, SpriteDatasetConfig) {
        let m = ModelConfig { frames: 2, height: 2, width: 2, layers: 2, heads: 2, head_dim: 4, ..ModelConfig::default() };
        let d = SpriteDatasetConfig { num_videos: 8, frames: 2, height: 2, width: 2, sprite_size: 1, ..Default::default() };
        (m, d)
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let (mc, dc) = tiny();
        let data = SpriteDataset::<f32>::generate(dc).unwrap();
        let mut model = ToyDiT::<f32>::new(mc, 1).unwrap();
        let before = model.clone();
        let cfg = TrainConfig { steps: 3, batch_size: 2, learning_rate: 0.0, eval_examples: 2, ..Default::default() };
        train(&mut model, &data, &cfg).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn one_small_step_decreases_example_loss() {
        let (mc, dc) = tiny();
        let data = SpriteDataset::<f64>::generate(dc).unwrap();
        let mut model = ToyDiT::<f64>::new(mc, 2).unwrap();
        let mut rng = stream_rng(5, 5);
        let ex = TrainingExample::draw(toy_encode(&data.videos[1].pixels), Condition::Class(1), 0.0, &mut rng);
        let (before, g) = model.loss_and_grad(&ex).unwrap();
        model.params.add_scaled(&g, -1e-3);
        let after = model.example_loss(&ex).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn training_is_deterministic() {
        let (mc, dc) = tiny();
        let data = SpriteDataset::<f32>::generate(dc).unwrap();
        let cfg = TrainConfig { steps: 4, batch_size: 2, learning_rate: 0.05, report_every: 2, eval_examples: 2, ..Default::default() };
        let run = || {
            let mut m = ToyDiT::<f32>::new(mc, 3).unwrap();
            let r = train(&mut m, &data, &cfg).unwrap();
            (m, r)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.losses.iter().map(|l| l.0).collect::<Vec<_>>(), vec![2, 4]);
    }

    #[test]
    fn divergence_reports_the_step() {
        let (mc, dc) = tiny();
        let data = SpriteDataset::<f32>::generate(dc).unwrap();
        let mut m = ToyDiT::<f32>::new(mc, 3).unwrap();
        let cfg = TrainConfig { steps: 50, batch_size: 1, learning_rate: 1e30, eval_examples: 1, ..Default::default() };
        match train(&mut m, &data, &cfg) {
            Err(Error::TrainingDivergence { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn small_model_gradients_match_finite_differences() {
        let (mc, dc) = tiny();
        let data = SpriteDataset::<f64>::generate(dc).unwrap();
        let model = ToyDiT::<f64>::new(mc, 4).unwrap();
        let mut rng = stream_rng(6, 6);
        let ex = TrainingExample::draw(toy_encode(&data.videos[1].pixels), Condition::Class(1), 0.0, &mut rng);
        for c in gradient_check(&model, &ex, 1e-5, 16).unwrap() {
            assert!(c.relative_error < 1e-3, "{c:?}");
        }
    }
}
