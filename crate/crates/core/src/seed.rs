//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a parent seed and a path of labels, so independent parts of a
//! run never share a stream and parallel work stays reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// FNV-1a, used to turn string labels into seed components.
pub fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Child seed for `parent` along a path of integer components.
pub fn derive_seed(parent: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix64(parent), |acc, &p| mix64(acc ^ mix64(p)))
}

/// Child seed along a single string label.
pub fn derive_labeled(parent: u64, label: &str) -> u64 {
    derive_seed(parent, &[label_hash(label)])
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
