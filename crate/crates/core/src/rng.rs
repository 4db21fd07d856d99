//! Seeded random streams.
//!
//! Every generator is `Xoshiro256PlusPlus`, seeded through `seed_from_u64`
//! (SplitMix64 expansion). Independent streams are derived from a base seed
//! and a stream tag, so adding a new consumer never shifts another one.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub(crate) const STREAM_MODEL: u64 = 1;
pub(crate) const STREAM_DATA: u64 = 2;
pub(crate) const STREAM_LABELS: u64 = 3;
pub(crate) const STREAM_SPLIT: u64 = 4;
pub(crate) const STREAM_NOISE: u64 = 5;
pub(crate) const STREAM_BATCHES: u64 = 6;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sub-stream `(tag, index)` of `base`.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    mix(mix(base ^ mix(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))).wrapping_add(index))
}

pub fn stream(base: u64, tag: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tag, index))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
