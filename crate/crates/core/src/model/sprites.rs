//! Synthetic moving-sprite videos.
//!
//! A bright square on a dark canvas, either stationary (class 0, "static")
//! or translating with a constant integer velocity (class 1, "moving").
//! Motion wraps around the canvas edges.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::VideoLatent;
use crate::rng::{indexed_rng, streams};
use crate::sampler::Condition;
use crate::scalar::Scalar;

pub const STATIC_CLASS: usize = 0;
pub const MOVING_CLASS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpriteDatasetConfig {
    pub num_videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Video channel plus reference slot as seen by the model.
    pub channels: usize,
    pub sprite_size: usize,
    /// Largest per-axis speed in pixels per frame.
    pub max_speed: usize,
    pub seed: u64,
}

impl Default for SpriteDatasetConfig {
    fn default() -> Self {
        Self { num_videos: 256, frames: 8, height: 8, width: 8, channels: 2, sprite_size: 2, max_speed: 1, seed: 0 }
    }
}

impl SpriteDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.sprite_size == 0 {
            return Err(Error::Config("dataset dimensions and sprite size must be positive".into()));
        }
        if self.sprite_size > self.height || self.sprite_size > self.width {
            return Err(Error::Config(format!(
                "sprite of size {} does not fit a {}x{} canvas",
                self.sprite_size, self.height, self.width
            )));
        }
        if self.channels != 2 {
            return Err(Error::Config(format!(
                "dataset.channels must be 2 (video + reference slot), got {}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// One rendered clip with its generating parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SpriteVideo<T> {
    /// Pixels in `[0, 1]`, shape `F × H × W × 1`.
    pub pixels: VideoLatent<T>,
    pub condition: Condition,
    /// Top-left corner `(row, col)` in frame 0.
    pub origin: (usize, usize),
    /// `(dy, dx)` in pixels per frame.
    pub velocity: (i64, i64),
}

/// Renders a sprite starting at `origin` and moving by `velocity` each frame.
pub fn render_sprite<T: Scalar>(cfg: &SpriteDatasetConfig, origin: (usize, usize), velocity: (i64, i64)) -> Result<VideoLatent<T>> {
    cfg.validate()?;
    let (h, w) = (cfg.height as i64, cfg.width as i64);
    let mut v = VideoLatent::zeros(cfg.frames, cfg.height, cfg.width, 1);
    for f in 0..cfg.frames {
        let top = origin.0 as i64 + velocity.0 * f as i64;
        let left = origin.1 as i64 + velocity.1 * f as i64;
        for dy in 0..cfg.sprite_size as i64 {
            for dx in 0..cfg.sprite_size as i64 {
                let y = (top + dy).rem_euclid(h) as usize;
                let x = (left + dx).rem_euclid(w) as usize;
                v.set(f, y, x, 0, T::one());
            }
        }
    }
    Ok(v)
}

/// Draws origin and (for the moving class) a nonzero velocity from `seed`.
pub fn generate_sprite_video<T: Scalar>(seed: u64, class: usize, cfg: &SpriteDatasetConfig) -> Result<SpriteVideo<T>> {
    if class > MOVING_CLASS {
        return Err(Error::Config(format!("sprite class {class} is neither static (0) nor moving (1)")));
    }
    cfg.validate()?;
    let mut rng = indexed_rng(seed, streams::DATASET, class as u64);
    let origin = (rng.random_range(0..cfg.height), rng.random_range(0..cfg.width));
    let velocity = if class == MOVING_CLASS {
        let m = cfg.max_speed as i64;
        loop {
            let v = (rng.random_range(-m..=m), rng.random_range(-m..=m));
            if v != (0, 0) || m == 0 {
                break v;
            }
        }
    } else {
        (0, 0)
    };
    Ok(SpriteVideo { pixels: render_sprite(cfg, origin, velocity)?, condition: Condition::Class(class), origin, velocity })
}

/// A dataset regenerated deterministically from its configuration.
#[derive(Debug, Clone)]
pub struct SpriteDataset<T> {
    pub config: SpriteDatasetConfig,
    pub videos: Vec<SpriteVideo<T>>,
}

impl<T: Scalar> SpriteDataset<T> {
    /// Video `i` has class `i mod 2`, so class counts differ by at most one.
    pub fn generate(config: SpriteDatasetConfig) -> Result<Self> {
        config.validate()?;
        let videos = (0..config.num_videos)
            .map(|i| generate_sprite_video(video_seed(config.seed, i), i % 2, &config))
            .collect::<Result<_>>()?;
        Ok(Self { config, videos })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

/// Per-video seed derived from the dataset seed.
pub fn video_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(frames: usize) -> SpriteDatasetConfig {
        SpriteDatasetConfig { frames, ..Default::default() }
    }

    fn sprite_columns(v: &VideoLatent<f64>, f: usize) -> Vec<usize> {
        let mut cols: Vec<usize> = (0..v.width()).filter(|&x| (0..v.height()).any(|y| v.get(f, y, x, 0) > 0.5)).collect();
        cols.sort();
        cols
    }

    #[test]
    fn stationary_sprite_gives_identical_frames() {
        let v: VideoLatent<f64> = render_sprite(&cfg(4), (3, 2), (0, 0)).unwrap();
        for f in 1..4 {
            assert_eq!(v.frame(f), v.frame(0));
        }
        assert_eq!(v.frame(0).iter().filter(|&&p| p == 1.0).count(), 4);
    }

    #[test]
    fn unit_velocity_moves_one_column_per_frame() {
        let v: VideoLatent<f64> = render_sprite(&cfg(3), (1, 1), (0, 1)).unwrap();
        assert_eq!(sprite_columns(&v, 0), vec![1, 2]);
        assert_eq!(sprite_columns(&v, 1), vec![2, 3]);
        assert_eq!(sprite_columns(&v, 2), vec![3, 4]);
    }

    #[test]
    fn motion_wraps_around() {
        let v: VideoLatent<f64> = render_sprite(&cfg(2), (0, 7), (0, 1)).unwrap();
        assert_eq!(sprite_columns(&v, 0), vec![0, 7]);
        assert_eq!(sprite_columns(&v, 1), vec![0, 1]);
    }

    #[test]
    fn oversized_sprite_is_a_config_error() {
        let c = SpriteDatasetConfig { sprite_size: 9, ..Default::default() };
        assert!(matches!(render_sprite::<f64>(&c, (0, 0), (0, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn classes_are_balanced_and_deterministic() {
        for n in [1, 7, 50, 51] {
            let d = SpriteDataset::<f32>::generate(SpriteDatasetConfig { num_videos: n, ..Default::default() }).unwrap();
            let moving = d.videos.iter().filter(|v| v.condition == Condition::Class(MOVING_CLASS)).count();
            assert!((moving as i64 - (n - moving) as i64).abs() <= 1);
        }
        let c = SpriteDatasetConfig { num_videos: 6, seed: 11, ..Default::default() };
        let a = SpriteDataset::<f32>::generate(c).unwrap();
        let b = SpriteDataset::<f32>::generate(c).unwrap();
        assert_eq!(a.videos, b.videos);
        for v in &a.videos {
            let moving = v.condition == Condition::Class(MOVING_CLASS);
            assert_eq!(moving, v.velocity != (0, 0));
            assert!(v.pixels.as_slice().iter().all(|&p| p == 0.0 || p == 1.0));
        }
    }
}
