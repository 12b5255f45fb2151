//! Seed derivation. Every random draw in the crate goes through a ChaCha8
//! stream keyed by `(seed, stream)`, so results are reproducible across
//! platforms and independent of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Named streams used when splitting a single seed.
pub mod streams {
    pub const SIGNAL: u64 = 1;
    pub const BASE_NOISE: u64 = 2;
    pub const FIELDS: u64 = 3;
    pub const DESIGN: u64 = 4;
    pub const LAMBDA: u64 = 5;
    pub const SIDE_NOISE: u64 = 6;
    pub const MCMC: u64 = 7;
    pub const DISORDER: u64 = 8;
    pub const FRESH: u64 = 9;
}

pub fn stream_rng(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// splitmix64 finaliser applied to `seed ^ tag`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
