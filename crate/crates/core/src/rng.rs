//! Seeded random streams.
//!
//! Every stochastic component draws from ChaCha8 seeded by the user seed and
//! a fixed stream id, so noise simulation, training and sampling can be
//! replayed independently from one `--seed`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_NOISE: u64 = 1;
pub const STREAM_TRAINING: u64 = 2;
pub const STREAM_SAMPLING: u64 = 3;
pub const STREAM_PATCHES: u64 = 4;
pub const STREAM_INIT: u64 = 5;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Independent stream for one of several parallel consumers (e.g. the three
/// partition models) sharing the same named stream.
pub fn substream(seed: u64, stream_id: u64, index: u64) -> ChaCha8Rng {
    stream(seed, (stream_id << 8) | index)
}
