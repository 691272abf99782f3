//! Deterministic seed derivation.
//!
//! Every randomized step draws from its own ChaCha stream whose seed is derived
//! from a parent seed and a textual tag, so adding a new random consumer never
//! shifts the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `parent` and a tag.
pub fn derive_seed(parent: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then mixed with the parent.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(parent ^ splitmix64(h))
}

/// Derive a child seed from `parent`, a tag and an integer index (epoch, batch, ...).
pub fn derive_indexed(parent: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive_seed(parent, tag) ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
