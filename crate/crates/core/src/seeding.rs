//! Deterministic RNG streams derived from a master seed and a label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for an independent stream named `label` under `seed`.
pub fn derive(seed: u64, label: &str) -> u64 {
    label
        .bytes()
        .fold(mix(seed), |acc, b| mix(acc ^ u64::from(b)))
}

pub fn stream(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive(seed, label))
}

/// Stream for the `index`-th item of a family (e.g. a resample).
pub fn indexed(seed: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(mix(derive(seed, label) ^ mix(index)))
}
