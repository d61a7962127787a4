//! Video latents and the binary stream format shared by latents and weights.
//!
//! A stream is five little-endian `u32` header words `(magic, F, H, W, C)`
//! followed by little-endian `f32` values.

use std::io::{Read, Write};

use crate::error::{dim_err, Error, Result};
use crate::layout::TokenLayout;
use crate::scalar::{all_finite, Scalar};

pub const LATENT_MAGIC: u32 = u32::from_le_bytes(*b"DMLT");
pub const WEIGHTS_MAGIC: u32 = u32::from_le_bytes(*b"DMWT");

/// A `frames × height × width × channels` array. Frame 0 is the reference slot.
///
/// Storage is frame-major, then row, column, channel, so each frame is a
/// contiguous slice and each token a contiguous run of `channels` values.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatent<T> {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

/// One `height × width × channels` frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Frame<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(dim_err!("{} values for a {height}x{width}x{channels} frame", data.len()));
        }
        Ok(Self { height, width, channels, data })
    }
}

impl<T: Scalar> VideoLatent<T> {
    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self { frames, height, width, channels, data: vec![T::zero(); frames * height * width * channels] }
    }

    pub fn from_vec(frames: usize, height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != frames * height * width * channels {
            return Err(dim_err!(
                "{} values for a {frames}x{height}x{width}x{channels} latent",
                data.len()
            ));
        }
        Ok(Self { frames, height, width, channels, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels)
    }

    pub fn layout(&self) -> Result<TokenLayout> {
        TokenLayout::new(self.frames, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, f: usize) -> &[T] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [T] {
        let n = self.frame_len();
        &mut self.data[f * n..(f + 1) * n]
    }

    pub fn frame_owned(&self, f: usize) -> Frame<T> {
        Frame { height: self.height, width: self.width, channels: self.channels, data: self.frame(f).to_vec() }
    }

    #[inline]
    pub fn get(&self, f: usize, y: usize, x: usize, c: usize) -> T {
        self.data[((f * self.height + y) * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, f: usize, y: usize, x: usize, c: usize, v: T) {
        self.data[((f * self.height + y) * self.width + x) * self.channels + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(dim_err!("latent shapes {:?} and {:?} differ", self.dims(), other.dims()));
        }
        Ok(())
    }

    fn with_data(&self, data: Vec<T>) -> Self {
        Self { frames: self.frames, height: self.height, width: self.width, channels: self.channels, data }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    /// Element-wise combination of two same-shaped latents.
    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(self.with_data(data))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs())))
    }

    pub fn cast<U: Scalar>(&self) -> VideoLatent<U> {
        VideoLatent {
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Writes the latent as a header plus `f32` stream.
    pub fn write_stream<W: Write>(&self, w: W) -> Result<()> {
        let header = [LATENT_MAGIC, self.frames as u32, self.height as u32, self.width as u32, self.channels as u32];
        write_stream(w, header, &self.data)
    }

    pub fn read_stream<R: Read>(r: R) -> Result<Self> {
        let (header, data) = read_stream(r)?;
        if header[0] != LATENT_MAGIC {
            return Err(Error::Format(format!("bad latent magic {:#010x}", header[0])));
        }
        let [_, f, h, w, c] = header.map(|v| v as usize);
        Self::from_vec(f, h, w, c, data).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Writes five header words followed by every value as little-endian `f32`.
pub fn write_stream<W: Write, T: Scalar>(mut w: W, header: [u32; 5], values: &[T]) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + 4 * values.len());
    for h in header {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a header and the full value payload.
pub fn read_stream<R: Read, T: Scalar>(mut r: R) -> Result<([u32; 5], Vec<T>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || (bytes.len() - 20) % 4 != 0 {
        return Err(Error::Format(format!("stream of {} bytes is truncated", bytes.len())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let header = [word(0), word(1), word(2), word(3), word(4)];
    let values = bytes[20..]
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Ok((header, values))
}
