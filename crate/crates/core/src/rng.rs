//! Deterministic stream derivation.
//!
//! Every random decision in the pipeline draws from a ChaCha8 stream seeded by
//! mixing a global seed with the identifiers of the decision point (segment id,
//! epoch, view, ...). Streams are therefore independent of iteration order and
//! of each other, which is what makes shuffling, augmentation and resumption
//! reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams for different purposes disjoint even when the
/// remaining words collide.
pub const TAG_SHUFFLE: u64 = 1;
pub const TAG_AUGMENT: u64 = 2;
pub const TAG_INIT: u64 = 3;
pub const TAG_SYNTH: u64 = 4;
pub const TAG_SPLIT: u64 = 5;
pub const TAG_PROBE: u64 = 6;
pub const TAG_SUBSAMPLE: u64 = 7;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix an ordered list of words into one seed: each word is absorbed through a
/// SplitMix64 round so that permuted inputs produce unrelated outputs.
pub fn mix(words: &[u64]) -> u64 {
    let mut h = 0xE220_A839_7B1D_CDAFu64;
    for &w in words {
        h = splitmix64(h ^ w);
    }
    h
}

/// Stream for the given decision point.
pub fn stream(words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(words))
}
