//! Seeded random streams.
//!
//! Every random draw in the toolkit comes from a ChaCha8 generator keyed by a
//! single user seed plus a named stream, so power iteration, data shuffling,
//! initialisation and attack restarts can be reproduced independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    PowerIteration,
    Shuffle,
    Init,
    Attack,
    Sampling,
    Data,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::PowerIteration => 1,
            Stream::Shuffle => 2,
            Stream::Init => 3,
            Stream::Attack => 4,
            Stream::Sampling => 5,
            Stream::Data => 6,
        }
    }
}

/// Generator for `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Generator for the `index`-th independent draw within a stream, e.g. one
/// per attacked sample.
pub fn indexed_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = stream_rng(seed, stream);
    // 2^36 words per index keeps sub-streams disjoint for any practical use.
    rng.set_word_pos((index as u128) << 36);
    rng
}
