//! Fixed per-pixel affine codec standing in for a learned video autoencoder.

use crate::latent::VideoLatent;
use crate::scalar::Scalar;

pub const CODEC_SCALE: f64 = 2.0;
pub const CODEC_SHIFT: f64 = -1.0;

/// `z = CODEC_SCALE·x + CODEC_SHIFT`, mapping pixels in `[0, 1]` to `[-1, 1]`.
pub fn toy_encode<T: Scalar>(pixels: &VideoLatent<T>) -> VideoLatent<T> {
    let (s, b) = (T::of(CODEC_SCALE), T::of(CODEC_SHIFT));
    pixels.map(|x| s * x + b)
}

pub fn toy_decode<T: Scalar>(latent: &VideoLatent<T>) -> VideoLatent<T> {
    let (s, b) = (T::of(CODEC_SCALE), T::of(CODEC_SHIFT));
    latent.map(|z| (z - b) / s)
}
