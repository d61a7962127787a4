//! Tiny spatiotemporal diffusion transformer trained with flow matching.
//!
//! Each latent position of every frame is one token. A token carries the
//! noisy latent value(s) concatenated with a reference-image slot, plus a
//! learned absolute position embedding, a projected sinusoidal time
//! embedding and a condition embedding. Pre-norm blocks of self-attention and
//! a GELU feedforward follow; a final projection returns a velocity field of
//! the latent's shape.

mod codec;
mod network;
mod params;
mod sprites;
mod train;

pub use codec::{toy_decode, toy_encode, CODEC_SCALE, CODEC_SHIFT};
pub use params::{BlockParams, ToyDiTParams};
pub use sprites::{
    generate_sprite_video, render_sprite, video_seed, SpriteDataset, SpriteDatasetConfig, SpriteVideo, MOVING_CLASS, STATIC_CLASS,
};
pub use train::{gradient_check, train, train_with_progress, GradientCheck, TrainConfig, TrainReport, TrainingExample};

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionCapture;
use crate::error::{Error, Result};
use crate::latent::{read_stream, write_stream, Frame, VideoLatent, WEIGHTS_MAGIC};
use crate::layout::TokenLayout;
use crate::modulation::BiasSpec;
use crate::sampler::{Condition, VelocityModel};
use crate::scalar::Scalar;

/// How the reference latent enters the token channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceConditioning {
    /// The reference frame is copied into the reference slot of every frame.
    Broadcast,
    /// Only frame-0 tokens carry the reference; other frames get zeros.
    FirstFrame,
    /// No reference slot content (text-to-video style counterpart).
    None,
}

impl ReferenceConditioning {
    pub fn as_str(self) -> &'static str {
        match self {
            ReferenceConditioning::Broadcast => "broadcast",
            ReferenceConditioning::FirstFrame => "first_frame",
            ReferenceConditioning::None => "none",
        }
    }
}

impl fmt::Display for ReferenceConditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReferenceConditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "broadcast" => Ok(Self::Broadcast),
            "first_frame" => Ok(Self::FirstFrame),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "unknown reference conditioning {other:?}, expected broadcast | first_frame | none"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub latent_channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Feedforward hidden width as a multiple of the model width.
    pub ff_mult: usize,
    pub num_classes: usize,
    pub reference: ReferenceConditioning,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 8,
            width: 8,
            latent_channels: 1,
            layers: 4,
            heads: 4,
            head_dim: 8,
            ff_mult: 4,
            num_classes: 2,
            reference: ReferenceConditioning::Broadcast,
        }
    }
}

impl ModelConfig {
    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.frames, self.height, self.width).expect("validated model config")
    }

    pub fn model_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn ff_width(&self) -> usize {
        self.ff_mult * self.model_width()
    }

    /// Latent channels plus the reference slot.
    pub fn in_channels(&self) -> usize {
        2 * self.latent_channels
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("latent_channels", self.latent_channels),
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ff_mult", self.ff_mult),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Attention bookkeeping for one forward pass.
#[derive(Debug, Default)]
pub struct ForwardProbe<'a, T> {
    /// Sink receiving post-softmax attention, if recording.
    pub capture: Option<&'a mut AttentionCapture<T>>,
    /// Sampling step recorded with captures.
    pub step: usize,
    pub plain_calls: usize,
    pub modulated_calls: usize,
}

impl<'a, T: Scalar> ForwardProbe<'a, T> {
    pub fn new() -> Self {
        Self { capture: None, step: 0, plain_calls: 0, modulated_calls: 0 }
    }

    pub fn with_capture(capture: Option<&'a mut AttentionCapture<T>>, step: usize) -> Self {
        Self { capture, step, plain_calls: 0, modulated_calls: 0 }
    }

    pub(crate) fn count_call(&mut self, bias: Option<&BiasSpec<T>>) {
        if bias.is_some() {
            self.modulated_calls += 1;
        } else {
            self.plain_calls += 1;
        }
    }
}

/// The toy velocity network `v(z_t, t, c, z_ref)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDiT<T> {
    pub config: ModelConfig,
    pub params: ToyDiTParams<T>,
}

impl<T: Scalar> ToyDiT<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self { params: ToyDiTParams::init(&config, seed), config })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Predicted velocity for `z_t` at time `t`.
    pub fn forward(
        &self,
        z_t: &VideoLatent<T>,
        t: T,
        cond: Condition,
        z_ref: &Frame<T>,
        bias: Option<&BiasSpec<T>>,
    ) -> Result<VideoLatent<T>> {
        Ok(self.run(z_t, t, cond, z_ref, bias, &mut ForwardProbe::new(), false)?.0)
    }

    pub fn cast<U: Scalar>(&self) -> ToyDiT<U> {
        let mut params = ToyDiTParams::<U>::init(&self.config, 0);
        let flat: Vec<U> = self.params.flatten().into_iter().map(|v| U::of(v.as_f64())).collect();
        params.load_flat(&flat).expect("identical architecture");
        ToyDiT { config: self.config, params }
    }

    /// Writes the weights as a header `(magic, F, H, W, in_channels)` plus `f32` stream.
    pub fn write_weights<W: Write>(&self, w: W) -> Result<()> {
        let c = &self.config;
        let header = [WEIGHTS_MAGIC, c.frames as u32, c.height as u32, c.width as u32, c.in_channels() as u32];
        write_stream(w, header, &self.params.flatten())
    }

    /// Reads weights written by [`Self::write_weights`] for an architecture described by `config`.
    pub fn read_weights<R: Read>(config: ModelConfig, r: R) -> Result<Self> {
        let (header, values) = read_stream::<_, T>(r)?;
        if header[0] != WEIGHTS_MAGIC {
            return Err(Error::Format(format!("bad weights magic {:#010x}", header[0])));
        }
        let expect = [config.frames, config.height, config.width, config.in_channels()];
        let found = [header[1], header[2], header[3], header[4]].map(|v| v as usize);
        if found != expect {
            return Err(Error::Format(format!("weights were saved for {found:?}, config describes {expect:?}")));
        }
        let mut model = Self::new(config, 0)?;
        model.params.load_flat(&values)?;
        Ok(model)
    }
}

impl<T: Scalar> VelocityModel<T> for ToyDiT<T> {
    fn layout(&self) -> TokenLayout {
        self.config.layout()
    }

    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn velocity(
        &self,
        z_t: &VideoLatent<T>,
        t: T,
        cond: Condition,
        z_ref: &Frame<T>,
        bias: Option<&BiasSpec<T>>,
        probe: &mut ForwardProbe<'_, T>,
    ) -> Result<VideoLatent<T>> {
        Ok(self.run(z_t, t, cond, z_ref, bias, probe, false)?.0)
    }
}
