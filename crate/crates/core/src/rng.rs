//! Seed splitting.
//!
//! Every random consumer draws from its own ChaCha stream keyed by
//! `(seed, stream id)`. Streams are independent counters, so introducing a new
//! consumer never shifts the values another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

/// Well-known stream identifiers.
pub mod streams {
    pub const INIT_NOISE: u64 = 0x01;
    pub const DATASET: u64 = 0x02;
    pub const PARAM_INIT: u64 = 0x03;
    pub const TRAIN_BATCH: u64 = 0x04;
    pub const TRAIN_NOISE: u64 = 0x05;
    pub const PROBE: u64 = 0x06;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for `stream` under the experiment `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// RNG for item `index` of `stream`, e.g. the n-th video of a dataset.
pub fn indexed_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64(stream.rotate_left(32) ^ splitmix64(index)));
    rng
}

pub fn standard_normal_vec<T: Scalar, R: rand::Rng>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            T::of(x)
        })
        .collect()
}
