//! Spatiotemporal token indexing.
//!
//! Tokens are ordered frame-major, then row-major inside a frame, so the
//! reference frame (frame 0) occupies the contiguous prefix `[0, H·W)`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token grid of `frames × height × width` latent positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenLayout {
    frames: usize,
    height: usize,
    width: usize,
}

impl TokenLayout {
    pub fn new(frames: usize, height: usize, width: usize) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Validation(format!(
                "layout dimensions must be positive, got {frames}x{height}x{width}"
            )));
        }
        Ok(Self { frames, height, width })
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

    /// Tokens per frame, `H·W`.
    pub fn frame_size(&self) -> usize {
        self.height * self.width
    }

    /// Total token count `S = F·H·W`.
    pub fn token_count(&self) -> usize {
        self.frames * self.frame_size()
    }

    pub fn flatten_index(&self, frame: usize, y: usize, x: usize) -> Result<usize> {
        if frame >= self.frames || y >= self.height || x >= self.width {
            return Err(Error::Range(format!(
                "coordinate (f={frame}, y={y}, x={x}) outside {}x{}x{}",
                self.frames, self.height, self.width
            )));
        }
        Ok(frame * self.frame_size() + y * self.width + x)
    }

    pub fn unflatten_index(&self, index: usize) -> Result<(usize, usize, usize)> {
        self.check_token(index)?;
        let within = index % self.frame_size();
        Ok((index / self.frame_size(), within / self.width, within % self.width))
    }

    /// Latent-frame index of token `index`.
    pub fn frame_of(&self, index: usize) -> Result<usize> {
        self.check_token(index)?;
        Ok(index / self.frame_size())
    }

    /// Token indices of frame `frame`.
    pub fn frame_tokens(&self, frame: usize) -> Range<usize> {
        let n = self.frame_size();
        frame * n..(frame + 1) * n
    }

    /// Indices of the reference-frame tokens, ascending.
    pub fn reference_indices(&self) -> Vec<usize> {
        self.frame_tokens(0).collect()
    }

    pub fn is_reference(&self, index: usize) -> bool {
        index < self.frame_size()
    }

    fn check_token(&self, index: usize) -> Result<()> {
        if index >= self.token_count() {
            return Err(Error::Range(format!(
                "token {index} outside [0, {})",
                self.token_count()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(f: usize, h: usize, w: usize) -> TokenLayout {
        TokenLayout::new(f, h, w).unwrap()
    }

    #[test]
    fn flatten_examples() {
        let l = layout(2, 2, 2);
        assert_eq!(l.flatten_index(0, 0, 0).unwrap(), 0);
        assert_eq!(l.flatten_index(1, 0, 0).unwrap(), 4);
        assert_eq!(l.flatten_index(1, 1, 1).unwrap(), 7);
        assert!(matches!(l.flatten_index(2, 0, 0), Err(Error::Range(_))));
        assert!(matches!(l.flatten_index(0, 0, 2), Err(Error::Range(_))));
    }

    #[test]
    fn flatten_is_a_bijection_by_enumeration() {
        let l = layout(2, 2, 2);
        let mut seen = vec![false; l.token_count()];
        for f in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let i = l.flatten_index(f, y, x).unwrap();
                    assert!(!seen[i]);
                    seen[i] = true;
                    assert_eq!(l.unflatten_index(i).unwrap(), (f, y, x));
                }
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn frame_of_examples() {
        assert_eq!(layout(2, 2, 2).frame_of(0).unwrap(), 0);
        assert_eq!(layout(2, 2, 2).frame_of(7).unwrap(), 1);
        let l = layout(4, 2, 2);
        assert_eq!(l.frame_of(13).unwrap(), 3);
        // brute-force inverse of flatten_index
        let (f, _, _) = (0..4)
            .flat_map(|f| (0..2).flat_map(move |y| (0..2).map(move |x| (f, y, x))))
            .find(|&(f, y, x)| l.flatten_index(f, y, x).unwrap() == 13)
            .unwrap();
        assert_eq!(f, 3);
        assert!(matches!(l.frame_of(16), Err(Error::Range(_))));
    }

    #[test]
    fn reference_index_examples() {
        assert_eq!(layout(2, 2, 2).reference_indices(), vec![0, 1, 2, 3]);
        assert_eq!(layout(1, 1, 1).reference_indices(), vec![0]);
        let l = layout(3, 1, 2);
        let brute: Vec<usize> = (0..l.token_count())
            .filter(|&i| l.frame_of(i).unwrap() == 0)
            .collect();
        assert_eq!(l.reference_indices(), brute);
        assert_eq!(brute, vec![0, 1]);
    }

    #[test]
    fn rejects_empty_dimensions() {
        assert!(TokenLayout::new(0, 2, 2).is_err());
    }

    proptest::proptest! {
        #[test]
        fn layout_invariants(f in 1usize..6, h in 1usize..6, w in 1usize..6) {
            let l = layout(f, h, w);
            proptest::prop_assert_eq!(l.token_count(), f * h * w);
            proptest::prop_assert_eq!(l.reference_indices().len() * f, l.token_count());
            for i in 0..l.token_count() {
                let (ff, y, x) = l.unflatten_index(i).unwrap();
                proptest::prop_assert_eq!(l.flatten_index(ff, y, x).unwrap(), i);
                proptest::prop_assert_eq!(l.frame_of(i).unwrap() == 0, l.is_reference(i));
            }
        }
    }
}
