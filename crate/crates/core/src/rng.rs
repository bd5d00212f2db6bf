//! Deterministic seed derivation.
//!
//! Every independent random stream (a start, a grid cell, a simulation chunk)
//! gets its own generator seeded from the user seed and a tag path, so adding
//! streams never perturbs existing ones and results do not depend on the
//! order in which worker threads pick up tasks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `seed`; equal inputs give equal outputs on every platform.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(seed);
    for &tag in tags {
        state = splitmix64(state ^ splitmix64(tag.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    state
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

// Stream tags.
pub(crate) const TAG_KMEANS: u64 = 1;
pub(crate) const TAG_RANDOM_START: u64 = 2;
pub(crate) const TAG_LANCZOS: u64 = 3;
pub(crate) const TAG_CELL: u64 = 4;
pub(crate) const TAG_SIM_PARAMS: u64 = 5;
pub(crate) const TAG_SIM_DRAWS: u64 = 6;
pub(crate) const TAG_OVERLAP_MC: u64 = 7;
