//! Forward pass and hand-derived backward pass of the toy DiT.

use crate::attention::{attend, attend_with_probs, AttentionConfig, AttentionTensor, CaptureSite};
use crate::error::{dim_err, Result};
use crate::latent::{Frame, VideoLatent};
use crate::modulation::BiasSpec;
use crate::sampler::Condition;
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_at, matmul_bt, Matrix};

use super::params::{BlockParams, ToyDiTParams};
use super::{ForwardProbe, ReferenceConditioning, ToyDiT};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

pub(crate) struct LnCache<T> {
    xhat: Matrix<T>,
    inv_std: Vec<T>,
}

fn layer_norm<T: Scalar>(x: &Matrix<T>, gain: &Matrix<T>, bias: &Matrix<T>) -> (Matrix<T>, LnCache<T>) {
    let (rows, d) = x.shape();
    let mut y = Matrix::zeros(rows, d);
    let mut xhat = Matrix::zeros(rows, d);
    let mut inv_std = Vec::with_capacity(rows);
    let inv_d = T::of(1.0 / d as f64);
    for i in 0..rows {
        let r = x.row(i);
        let mean = r.iter().copied().sum::<T>() * inv_d;
        let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let is = T::one() / (var + T::of(LN_EPS)).sqrt();
        inv_std.push(is);
        let (xr, yr) = (xhat.row_mut(i), &mut y.as_mut_slice()[i * d..(i + 1) * d]);
        for c in 0..d {
            let h = (r[c] - mean) * is;
            xr[c] = h;
            yr[c] = h * gain.as_slice()[c] + bias.as_slice()[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &LnCache<T>,
    gain: &Matrix<T>,
    d_gain: &mut Matrix<T>,
    d_bias: &mut Matrix<T>,
) -> Matrix<T> {
    let (rows, d) = dy.shape();
    let mut dx = Matrix::zeros(rows, d);
    let inv_d = T::of(1.0 / d as f64);
    let g = gain.as_slice();
    let mut dxhat = vec![T::zero(); d];
    for i in 0..rows {
        let (dyr, xr) = (dy.row(i), cache.xhat.row(i));
        for c in 0..d {
            d_gain.as_mut_slice()[c] += dyr[c] * xr[c];
            d_bias.as_mut_slice()[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
        }
        let sum_dxhat = dxhat.iter().copied().sum::<T>();
        let sum_dxhat_x = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
        let is = cache.inv_std[i];
        for (c, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = is * (dxhat[c] - inv_d * sum_dxhat - inv_d * xr[c] * sum_dxhat_x);
        }
    }
    dx
}

#[inline]
fn gelu<T: Scalar>(u: T) -> T {
    let (c, a) = (T::of(GELU_C), T::of(GELU_A));
    T::of(0.5) * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(u: T) -> T {
    let (c, a) = (T::of(GELU_C), T::of(GELU_A));
    let th = (c * (u + a * u * u * u)).tanh();
    let half = T::of(0.5);
    half * (T::one() + th) + half * u * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * u * u)
}

/// Sinusoidal features of `t ∈ [0, 1]`, sine half then cosine half.
pub(crate) fn time_features<T: Scalar>(t: T, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    let t = t.as_f64() * 1000.0;
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = T::of((t * freq).sin());
        out[half + k] = T::of((t * freq).cos());
    }
    out
}

pub(crate) struct BlockCache<T> {
    ln1: LnCache<T>,
    a: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<AttentionTensor<T>>,
    o: Matrix<T>,
    ln2: LnCache<T>,
    m: Matrix<T>,
    u: Matrix<T>,
    g: Matrix<T>,
}

pub(crate) struct ForwardCache<T> {
    tokens: Matrix<T>,
    time_feat: Vec<T>,
    cond_row: usize,
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    hf: Matrix<T>,
}

impl<T: Scalar> ToyDiT<T> {
    fn attention_config(&self) -> AttentionConfig {
        AttentionConfig { num_heads: self.config.heads, head_dim: self.config.head_dim, capture_enabled: true }
    }

    /// Builds the `S × in_channels` token matrix: the noisy latent followed by the reference slot.
    pub(crate) fn build_tokens(&self, z_t: &VideoLatent<T>, z_ref: &Frame<T>) -> Result<Matrix<T>> {
        let cfg = &self.config;
        let c = cfg.latent_channels;
        if z_t.dims() != (cfg.frames, cfg.height, cfg.width, c) {
            return Err(dim_err!(
                "latent {:?} vs model {:?}",
                z_t.dims(),
                (cfg.frames, cfg.height, cfg.width, c)
            ));
        }
        if (z_ref.height, z_ref.width, z_ref.channels) != (cfg.height, cfg.width, c) {
            return Err(dim_err!(
                "reference frame {}x{}x{} vs model {}x{}x{c}",
                z_ref.height,
                z_ref.width,
                z_ref.channels,
                cfg.height,
                cfg.width
            ));
        }
        let per_frame = cfg.height * cfg.width;
        let s = cfg.frames * per_frame;
        let mut tokens = Matrix::zeros(s, 2 * c);
        let src = z_t.as_slice();
        for i in 0..s {
            let p = i % per_frame;
            let row = tokens.row_mut(i);
            row[..c].copy_from_slice(&src[i * c..(i + 1) * c]);
            let with_ref = match cfg.reference {
                ReferenceConditioning::Broadcast => true,
                ReferenceConditioning::FirstFrame => i < per_frame,
                ReferenceConditioning::None => false,
            };
            if with_ref {
                row[c..].copy_from_slice(&z_ref.data[p * c..(p + 1) * c]);
            }
        }
        Ok(tokens)
    }

    fn embed(&self, tokens: &Matrix<T>, time_feat: &[T], cond_row: usize) -> Result<Matrix<T>> {
        let p = &self.params;
        let mut h = matmul(tokens, &p.w_in)?;
        h.add_row_vector(p.b_in.as_slice());
        h.add_assign(&p.pos);
        let tf = Matrix::from_vec(1, time_feat.len(), time_feat.to_vec())?;
        let mut temb = matmul(&tf, &p.w_time)?;
        temb.add_assign(&p.b_time);
        h.add_row_vector(temb.as_slice());
        h.add_row_vector(p.cond.row(cond_row));
        Ok(h)
    }

    pub(crate) fn cond_row(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Null => Ok(self.config.num_classes),
            Condition::Class(c) if c < self.config.num_classes => Ok(c),
            Condition::Class(c) => Err(dim_err!("class {c} outside the {} model classes", self.config.num_classes)),
        }
    }

    /// Runs the network. With `keep_cache`, returns the activations needed for backpropagation.
    pub(crate) fn run(
        &self,
        z_t: &VideoLatent<T>,
        t: T,
        cond: Condition,
        z_ref: &Frame<T>,
        bias: Option<&BiasSpec<T>>,
        probe: &mut ForwardProbe<'_, T>,
        keep_cache: bool,
    ) -> Result<(VideoLatent<T>, Option<ForwardCache<T>>)> {
        let p = &self.params;
        let att_cfg = self.attention_config();
        let tokens = self.build_tokens(z_t, z_ref)?;
        let time_feat = time_features(t, self.config.model_width());
        let cond_row = self.cond_row(cond)?;
        let mut h = self.embed(&tokens, &time_feat, cond_row)?;
        let mut caches = Vec::new();
        for (layer, blk) in p.blocks.iter().enumerate() {
            let (a, ln1) = layer_norm(&h, &blk.ln1_gain, &blk.ln1_bias);
            let q = matmul(&a, &blk.wq)?;
            let k = matmul(&a, &blk.wk)?;
            let v = matmul(&a, &blk.wv)?;
            probe.count_call(bias);
            let (o, probs) = if keep_cache {
                attend_with_probs(&q, &k, &v, bias, &att_cfg)?
            } else {
                let site = probe.capture.as_deref_mut().map(|sink| CaptureSite { sink, step: probe.step, layer });
                (attend(&q, &k, &v, bias, &att_cfg, site)?, Vec::new())
            };
            let mut proj = matmul(&o, &blk.wo)?;
            proj.add_row_vector(blk.bo.as_slice());
            h.add_assign(&proj);
            let (m, ln2) = layer_norm(&h, &blk.ln2_gain, &blk.ln2_bias);
            let mut u = matmul(&m, &blk.w1)?;
            u.add_row_vector(blk.b1.as_slice());
            let g = u.map(gelu);
            let mut ff = matmul(&g, &blk.w2)?;
            ff.add_row_vector(blk.b2.as_slice());
            h.add_assign(&ff);
            if keep_cache {
                caches.push(BlockCache { ln1, a, q, k, v, probs, o, ln2, m, u, g });
            }
        }
        let (hf, lnf) = layer_norm(&h, &p.lnf_gain, &p.lnf_bias);
        let mut out = matmul(&hf, &p.w_out)?;
        out.add_row_vector(p.b_out.as_slice());
        let (f, hh, w, c) = z_t.dims();
        let velocity = VideoLatent::from_vec(f, hh, w, c, out.into_vec())?;
        let cache = keep_cache.then_some(ForwardCache { tokens, time_feat, cond_row, blocks: caches, lnf, hf });
        Ok((velocity, cache))
    }

    /// Gradient of a scalar loss given `d_out = ∂loss/∂velocity`.
    pub(crate) fn backward(&self, cache: &ForwardCache<T>, d_out: &VideoLatent<T>) -> Result<ToyDiTParams<T>> {
        let p = &self.params;
        let mut g = p.zeros_like();
        let s = cache.tokens.rows();
        let d_y = Matrix::from_vec(s, self.config.latent_channels, d_out.as_slice().to_vec())?;

        g.w_out = matmul_at(&cache.hf, &d_y)?;
        g.b_out = Matrix::from_vec(1, d_y.cols(), d_y.column_sums())?;
        let d_hf = matmul_bt(&d_y, &p.w_out)?;
        let mut dh = layer_norm_backward(&d_hf, &cache.lnf, &p.lnf_gain, &mut g.lnf_gain, &mut g.lnf_bias);

        for (layer, (blk, c)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut g.blocks[layer];
            dh = self.block_backward(blk, c, gb, dh)?;
        }

        g.b_in = Matrix::from_vec(1, dh.cols(), dh.column_sums())?;
        g.w_in = matmul_at(&cache.tokens, &dh)?;
        g.pos = dh.clone();
        let d_temb = dh.column_sums();
        g.b_time = Matrix::from_vec(1, d_temb.len(), d_temb.clone())?;
        let tf = Matrix::from_vec(1, cache.time_feat.len(), cache.time_feat.clone())?;
        g.w_time = matmul_at(&tf, &g.b_time)?;
        g.cond.row_mut(cache.cond_row).copy_from_slice(&d_temb);
        Ok(g)
    }

    fn block_backward(
        &self,
        blk: &BlockParams<T>,
        c: &BlockCache<T>,
        gb: &mut BlockParams<T>,
        dh_out: Matrix<T>,
    ) -> Result<Matrix<T>> {
        // feedforward branch
        gb.w2 = matmul_at(&c.g, &dh_out)?;
        gb.b2 = Matrix::from_vec(1, dh_out.cols(), dh_out.column_sums())?;
        let dg = matmul_bt(&dh_out, &blk.w2)?;
        let mut du = dg;
        for (d, &u) in du.as_mut_slice().iter_mut().zip(c.u.as_slice()) {
            *d *= gelu_grad(u);
        }
        gb.w1 = matmul_at(&c.m, &du)?;
        gb.b1 = Matrix::from_vec(1, du.cols(), du.column_sums())?;
        let dm = matmul_bt(&du, &blk.w1)?;
        let mut dh_mid = layer_norm_backward(&dm, &c.ln2, &blk.ln2_gain, &mut gb.ln2_gain, &mut gb.ln2_bias);
        dh_mid.add_assign(&dh_out);

        // attention branch
        gb.wo = matmul_at(&c.o, &dh_mid)?;
        gb.bo = Matrix::from_vec(1, dh_mid.cols(), dh_mid.column_sums())?;
        let d_o = matmul_bt(&dh_mid, &blk.wo)?;
        let dh_head = self.config.head_dim;
        let scale = T::one() / T::of(dh_head as f64).sqrt();
        let (s, d) = c.q.shape();
        let mut dq = Matrix::zeros(s, d);
        let mut dk = Matrix::zeros(s, d);
        let mut dv = Matrix::zeros(s, d);
        for (h, probs) in c.probs.iter().enumerate() {
            let off = h * dh_head;
            let pm = probs.matrix();
            let (qh, kh, vh) = (c.q.column_block(off, dh_head), c.k.column_block(off, dh_head), c.v.column_block(off, dh_head));
            let doh = d_o.column_block(off, dh_head);
            dv.set_column_block(off, &matmul_at(pm, &doh)?);
            let mut dlogits = matmul_bt(&doh, &vh)?;
            for i in 0..s {
                let (pr, dr) = (pm.row(i), dlogits.row_mut(i));
                let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (x, &pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            dq.set_column_block(off, &matmul(&dlogits, &kh)?);
            dk.set_column_block(off, &matmul_at(&dlogits, &qh)?);
        }
        gb.wq = matmul_at(&c.a, &dq)?;
        gb.wk = matmul_at(&c.a, &dk)?;
        gb.wv = matmul_at(&c.a, &dv)?;
        let mut da = matmul_bt(&dq, &blk.wq)?;
        da.add_assign(&matmul_bt(&dk, &blk.wk)?);
        da.add_assign(&matmul_bt(&dv, &blk.wv)?);
        let mut dh = layer_norm_backward(&da, &c.ln1, &blk.ln1_gain, &mut gb.ln1_gain, &mut gb.ln1_bias);
        dh.add_assign(&dh_mid);
        Ok(dh)
    }
}
