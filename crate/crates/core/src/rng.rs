//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a base seed mixed with stream-specific tags, so streams never
//! depend on the order in which other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, t| splitmix64(acc ^ splitmix64(*t)))
}

/// Independent stream for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(mix(seed, tags))
}

/// Stream labels, to keep call sites readable.
pub mod tag {
    pub const CORPUS: u64 = 1;
    pub const USER: u64 = 2;
    pub const INIT: u64 = 3;
    pub const EPOCH: u64 = 4;
    pub const STEP: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const NEGATIVES: u64 = 7;
    pub const INDEX: u64 = 8;
    pub const HNSW: u64 = 9;
    pub const CMS: u64 = 10;
}
