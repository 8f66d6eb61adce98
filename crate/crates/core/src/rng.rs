//! Seeded random streams. Every stochastic component takes its generator
//! explicitly so runs are reproducible from a single seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, tags...)`, e.g. `(seed, sample, step)`.
pub fn derive(seed: u64, tags: &[u64]) -> SeededRng {
    // splitmix64 over the tag sequence
    let mut h = seed;
    for &t in tags {
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    ChaCha8Rng::seed_from_u64(h)
}
