//! Seed expansion. One user-facing seed fans out into independent named
//! streams so that, e.g., changing the batch order never perturbs the
//! initialization.
//!
//! `derive(seed, name) = splitmix64(splitmix64(seed) ^ fnv1a64(name))`, and each
//! stream is a ChaCha8 generator seeded with the derived value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Parameter initialization.
pub const INIT: &str = "init";
/// Synthetic data generation.
pub const DATA: &str = "data";
/// Mini-batch sampling.
pub const BATCH: &str = "batch";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Seed of the stream `name` under the user seed `seed`.
pub fn derive(seed: u64, name: &str) -> u64 {
    splitmix64(splitmix64(seed) ^ fnv1a64(name))
}

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, name))
}
