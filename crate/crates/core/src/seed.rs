//! Seed derivation. Every random stream in a run is keyed off the run seed
//! plus a fixed stream tag, so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const STREAM_DATA: u64 = 0x01;
pub(crate) const STREAM_PARTITION: u64 = 0x02;
pub(crate) const STREAM_INIT: u64 = 0x03;
pub(crate) const STREAM_TRAIN: u64 = 0x04;
pub(crate) const STREAM_SPLIT: u64 = 0x05;
pub(crate) const STREAM_PARTICIPATION: u64 = 0x06;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from `base` and an ordered list of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
