//! Deterministic seed splitting.
//!
//! Every invocation has one root seed. Consumers derive their own stream from
//! the root and a label so that adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a textual label.
pub fn derive(seed: u64, label: &str) -> u64 {
    let mut h = mix64(seed);
    for b in label.bytes() {
        h = mix64(h ^ u64::from(b));
    }
    h
}

/// Derive a child seed from a parent seed and an index.
pub fn derive_index(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(seed: u64, label: &str) -> Rng {
    rng(derive(seed, label))
}
