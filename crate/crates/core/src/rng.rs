//! Seeded, splittable random streams.
//!
//! Every stochastic operation takes an explicit seed. Independent streams
//! are derived from a base seed and a label so that, for example, the noise
//! drawn for sample 17 does not depend on how many other samples were
//! scored before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Named stream labels; each gets its own ChaCha stream id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Timestep = 3,
    Noise = 4,
    Data = 5,
    Split = 6,
    Attack = 7,
}

/// Generator for `(seed, stream)`.
pub fn rng(seed: u64, stream: Stream) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

/// Generator for `(seed, stream, index)`, independent across indices.
pub fn indexed_rng(seed: u64, stream: Stream, index: u64) -> Rng {
    rng(split_seed(seed, index), stream)
}

/// SplitMix64 finalizer over `seed ^ f(index)`.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
