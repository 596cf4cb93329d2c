//! Seeded randomness. Every stochastic decision in the crate flows through a
//! `ChaCha8Rng` so that equal seeds give bit-identical runs on any platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Builds the root generator for a run.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from a root seed and an index.
///
/// Used to give each trace / experiment / epoch its own generator so work
/// items can be processed in any order (or in parallel) without changing
/// the result. SplitMix64 finalizer; good avalanche, stable across builds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child generator for work item `index` under root `seed`.
pub fn child(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index))
}
