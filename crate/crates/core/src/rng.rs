//! Seeded randomness. Every stochastic routine derives its generator here so
//! a run is a pure function of its seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type GidRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> GidRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for a named sub-task of a seeded run.
pub fn derive(seed: u64, stream: u64) -> GidRng {
    // splitmix64 finaliser over (seed, stream)
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}
