//! Splittable seeding.
//!
//! Every random stream in the crate is a ChaCha8 generator keyed by a seed
//! derived from the master seed and a path of integer tags. Derivation is a
//! pure function, so work can be split across workers in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of a sequence of tags, order-sensitive.
pub fn hash_tags(tags: &[u64]) -> u64 {
    tags.iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &t| mix64(acc ^ mix64(t)))
}

/// `seed ⊕ hash(tags)`.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    seed ^ hash_tags(tags)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    rng(derive(seed, tags))
}

/// Stable tag for a string label (FNV-1a).
pub fn tag(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
