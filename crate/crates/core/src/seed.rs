//! Stable seed derivation.
//!
//! Every random stream in the crate is keyed by a 64-bit master seed plus a
//! short path of tags (level, user index, trial index, ...). Derivation is a
//! chain of SplitMix64 finalizers, so it is stable across platforms and
//! releases and independent of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// FNV-1a, used to turn labels (method names, dataset names) into seed tags.
pub fn label_tag(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn rng_for(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

pub(crate) mod tags {
    pub const SHUFFLE: u64 = 1;
    pub const USER: u64 = 2;
    pub const DATA: u64 = 3;
    pub const TRIAL: u64 = 4;
    pub const RANGE_QUERY: u64 = 5;
}
