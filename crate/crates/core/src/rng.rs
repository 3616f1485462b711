//! Index-derived random streams.
//!
//! Every random quantity is drawn from a ChaCha stream addressed by
//! `(seed, stream)`, so results never depend on scheduling or worker count.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream tags separating independent consumers of one master seed.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const TEST: u64 = 2;
    pub const DATA_AUX: u64 = 3;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child seed for item `index` of the consumer `tag`.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    stream_rng(master, (tag << 48) ^ index).next_u64()
}
