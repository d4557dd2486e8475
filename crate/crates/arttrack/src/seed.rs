//! Deterministic seed derivation.
//!
//! Every stochastic step in the pipeline (pair sampling, noise injection,
//! downsampling, Monte-Carlo estimates) draws from a `ChaCha8Rng` seeded
//! through this module, so a run is fully reproducible from a single
//! configured seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mix a base seed with a sequence of tags (frame index, part index, ...)
/// into a new 64-bit seed. SplitMix64-style finalizer; stable across
/// platforms.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        state = state.wrapping_add(t).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        state ^= state >> 27;
        state = state.wrapping_mul(0x94d0_49bb_1331_11eb);
        state ^= state >> 31;
    }
    state
}

/// RNG seeded from a base seed and tags.
pub fn rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}
