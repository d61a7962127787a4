use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{standard_normal_vec, stream_rng, streams};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::ModelConfig;

/// Weights of one transformer block. Vectors are stored as `1×n` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gain: Matrix<T>,
    pub ln1_bias: Matrix<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub bo: Matrix<T>,
    pub ln2_gain: Matrix<T>,
    pub ln2_bias: Matrix<T>,
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

/// Every weight tensor of the toy DiT.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDiTParams<T> {
    /// Token input projection, `in_channels × d`.
    pub w_in: Matrix<T>,
    pub b_in: Matrix<T>,
    /// Learned absolute position embedding, `S × d`.
    pub pos: Matrix<T>,
    /// Projection of the sinusoidal time features, `d × d`.
    pub w_time: Matrix<T>,
    pub b_time: Matrix<T>,
    /// Condition embedding table; the last row is the null condition.
    pub cond: Matrix<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub lnf_gain: Matrix<T>,
    pub lnf_bias: Matrix<T>,
    /// Output projection, `d × latent_channels`.
    pub w_out: Matrix<T>,
    pub b_out: Matrix<T>,
}

fn gaussian<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    let v: Vec<f64> = standard_normal_vec(rng, rows * cols);
    Matrix::from_vec(rows, cols, v.into_iter().map(|x| T::of(x * std)).collect()).unwrap()
}

fn filled<T: Scalar>(cols: usize, v: f64) -> Matrix<T> {
    Matrix::from_vec(1, cols, vec![T::of(v); cols]).unwrap()
}

impl<T: Scalar> ToyDiTParams<T> {
    /// Deterministic initialization from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, streams::PARAM_INIT);
        let d = cfg.model_width();
        let ff = cfg.ff_width();
        let s = cfg.layout().token_count();
        let resid = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams {
                ln1_gain: filled(d, 1.0),
                ln1_bias: filled(d, 0.0),
                wq: gaussian(&mut rng, d, d, fan(d)),
                wk: gaussian(&mut rng, d, d, fan(d)),
                wv: gaussian(&mut rng, d, d, fan(d)),
                wo: gaussian(&mut rng, d, d, fan(d) * resid),
                bo: filled(d, 0.0),
                ln2_gain: filled(d, 1.0),
                ln2_bias: filled(d, 0.0),
                w1: gaussian(&mut rng, d, ff, fan(d)),
                b1: filled(ff, 0.0),
                w2: gaussian(&mut rng, ff, d, fan(ff) * resid),
                b2: filled(d, 0.0),
            })
            .collect();
        Self {
            w_in: gaussian(&mut rng, cfg.in_channels(), d, fan(cfg.in_channels())),
            b_in: filled(d, 0.0),
            pos: gaussian(&mut rng, s, d, 0.5),
            w_time: gaussian(&mut rng, d, d, fan(d)),
            b_time: filled(d, 0.0),
            cond: gaussian(&mut rng, cfg.num_classes + 1, d, 0.5),
            blocks,
            lnf_gain: filled(d, 1.0),
            lnf_bias: filled(d, 0.0),
            w_out: gaussian(&mut rng, d, cfg.latent_channels, fan(d)),
            b_out: filled(cfg.latent_channels, 0.0),
        }
    }

    /// All-zero tensors with the same shapes, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// Tensor names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["w_in", "b_in", "pos", "w_time", "b_time", "cond"].map(String::from).to_vec();
        for l in 0..self.blocks.len() {
            for n in ["ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo", "bo", "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2"] {
                names.push(format!("blocks.{l}.{n}"));
            }
        }
        names.extend(["lnf_gain", "lnf_bias", "w_out", "b_out"].map(String::from));
        names
    }

    /// Tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.w_in, &self.b_in, &self.pos, &self.w_time, &self.b_time, &self.cond];
        for b in &self.blocks {
            out.extend([
                &b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.bo, &b.ln2_gain, &b.ln2_bias, &b.w1,
                &b.b1, &b.w2, &b.b2,
            ]);
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.w_out, &self.b_out]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![
            &mut self.w_in,
            &mut self.b_in,
            &mut self.pos,
            &mut self.w_time,
            &mut self.b_time,
            &mut self.cond,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.w_out, &mut self.b_out]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.as_slice().iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (p, g) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, &b) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += scale * b;
            }
        }
    }

    /// Concatenation of every tensor in canonical order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|t| t.as_slice().iter().copied()).collect()
    }

    /// Overwrites every tensor from a flat vector produced by [`Self::flatten`].
    pub fn load_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Format(format!(
                "{} weights supplied, model has {}",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.as_slice().len();
            t.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}
