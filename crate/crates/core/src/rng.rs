//! Seeded randomness.
//!
//! Every random draw in the crate comes from a ChaCha20 stream cipher used as
//! a counter-mode generator (`rand_chacha::ChaCha20Rng`). A generator is
//! created from a 64-bit seed via `seed_from_u64`, which expands the seed with
//! PCG32 into the 256-bit key. Sub-seeds for independent pipeline stages are
//! derived from one user seed by [`sub_seed`]: the SplitMix64 finalizer applied
//! to `seed + stream * 0x9E3779B97F4A7C15`.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Stream tags for [`sub_seed`].
pub mod stream {
    pub const GRAPH: u64 = 1;
    pub const INJECT: u64 = 2;
    pub const ENCODER: u64 = 3;
    pub const DENOISER: u64 = 4;
    pub const PROBE: u64 = 5;
}

pub fn rng_from_seed(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}
