//! Seed derivation for independent random streams.
//!
//! Parallel stages (per-tree, per-record, per-copy) each get their own
//! `ChaCha8Rng` derived from a named base seed plus integer tags, so the
//! output never depends on scheduling order or thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with integer tags into a new 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    state
}

/// A seeded ChaCha stream for the given base seed and tags.
pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}
