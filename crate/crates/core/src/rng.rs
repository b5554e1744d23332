//! Seed derivation. Every random quantity in the crate is drawn from a
//! ChaCha8 stream keyed by a base seed plus a purpose label, so that adding a
//! new consumer never shifts the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Derive a child seed from `(seed, label, index)`.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ label_hash(label)) ^ splitmix64(index.wrapping_add(1)))
}

pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label, index))
}
