//! Seeded random streams. Every random draw in the crate goes through a
//! stream derived here, so results depend only on explicit seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Independent stream `tag` under `seed`.
pub fn stream(seed: u64, tag: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Stream tags used across the crate; distinct values keep draws for
/// different purposes uncorrelated under a shared seed.
pub mod tags {
    pub const DATASET: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const ROUTER_BATCHES: u64 = 4;
    pub const ROUTER_EVAL: u64 = 5;
    pub const LABEL_SHUFFLE: u64 = 6;
    /// Sampler noise for prompt `i` uses `SAMPLE_BASE + i`.
    pub const SAMPLE_BASE: u64 = 1 << 32;
}
