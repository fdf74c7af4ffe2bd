//! Seed splitting: every random stream in a run is derived from the run seed
//! and a path of integer tags, so no two consumers share a stream and any
//! step can be replayed in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and the tag path.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t.wrapping_add(0x632b_e59b_d9b4_e019))))
}

/// A ChaCha8 generator seeded from `derive(seed, tags)`.
pub fn rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

/// Stream tags. Kept in one place so that accidental reuse is visible.
pub mod tag {
    pub const SCENE: u64 = 1;
    pub const ANNOTATION: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const AUX_CONTRAST: u64 = 4;
    pub const INIT: u64 = 10;
    pub const SHUFFLE: u64 = 11;
    pub const AUG: u64 = 12;
    pub const ENSEMBLE: u64 = 13;
    pub const NOISE_ORACLE: u64 = 14;
    pub const AUX_DATA: u64 = 15;
}
