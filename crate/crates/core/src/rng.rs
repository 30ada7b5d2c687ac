//! Seed derivation.
//!
//! Every stochastic consumer receives its own stream, derived from a base
//! seed and a path of tags, so results never depend on evaluation order or
//! on how work is split across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type TifRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base` one at a time.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &tag| {
        splitmix64(acc ^ splitmix64(tag))
    })
}

pub fn rng_for(base: u64, tags: &[u64]) -> TifRng {
    TifRng::seed_from_u64(derive_seed(base, tags))
}

pub fn fill_normal_f32(rng: &mut TifRng, out: &mut [f32]) {
    for v in out {
        *v = rng.sample::<f32, _>(StandardNormal);
    }
}

pub fn fill_normal_f64(rng: &mut TifRng, out: &mut [f64]) {
    for v in out {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
}

/// Namespaces for [`derive_seed`] so unrelated consumers never share a stream.
pub mod stream {
    pub const TASK: u64 = 1;
    pub const JITTER_TRAIN: u64 = 2;
    pub const JITTER_TEST: u64 = 3;
    pub const JITTER_POOL: u64 = 4;
    pub const PRETRAIN: u64 = 5;
    pub const ADAPTER: u64 = 6;
    pub const SCORE: u64 = 7;
    pub const SAMPLE: u64 = 8;
    pub const FLIP: u64 = 9;
    pub const MONTE_CARLO: u64 = 10;
    pub const INIT: u64 = 11;
    pub const BASELINE: u64 = 12;
    pub const HELDOUT: u64 = 13;
}
