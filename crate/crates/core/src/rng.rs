//! Seeded generators with named streams.
//!
//! Each stream is an independent ChaCha8 sequence derived from the same seed,
//! so the population draw of a replicate can be replayed without touching the
//! sampling draw and vice versa.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Population,
    Sample,
    MonteCarlo,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Population => 1,
            Stream::Sample => 2,
            Stream::MonteCarlo => 3,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
