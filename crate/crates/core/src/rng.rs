//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the 64-bit run seed, with the
//! ChaCha stream id set from a `(purpose, index)` pair. Streams for different
//! nodes are independent of each other and of the order they are drawn in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for; keeps streams of different roles apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Purpose {
    Innovations = 1,
    Coefficients = 2,
    Init = 3,
    Shuffle = 4,
    Noise = 5,
    Replication = 6,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 40) ^ index);
    rng
}

/// Derives a child seed, e.g. one per Monte-Carlo replication.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    use rand::RngCore;
    stream(seed, Purpose::Replication, index).next_u64()
}
