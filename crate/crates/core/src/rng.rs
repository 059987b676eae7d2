//! Seed handling shared by every stochastic step.
//!
//! All randomness flows from a single 64-bit master seed. Sub-seeds are
//! derived with [`derive`] (a SplitMix64 finalizer over the combined words)
//! and fed to ChaCha8, whose output stream is fixed across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a sub-seed for a named stage and index.
pub fn derive(seed: u64, stage: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ mix64(stage)) ^ index)
}

pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
