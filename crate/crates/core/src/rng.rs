//! Seed derivation. Every sample, epoch and worker gets its own stream so
//! results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type TabRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic child seed of `seed` addressed by `path`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn derive_rng(seed: u64, path: &[u64]) -> TabRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

pub fn seeded(seed: u64) -> TabRng {
    ChaCha8Rng::seed_from_u64(seed)
}
