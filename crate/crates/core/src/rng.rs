//! Seeded RNG stream derivation.
//!
//! Every consumer of randomness (weight init, shuffling, dropout masks,
//! index-set sampling) owns its own stream derived from the global seed
//! plus a role tag and loop counters. Streams never interleave, so adding
//! or removing one consumer cannot perturb another; that independence is
//! what makes the all-lambdas-zero distillation run bit-identical to
//! plain training.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream roles. The discriminant is mixed into the derived seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle,
    Dropout,
    Sample,
    Data,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x01,
            Stream::Shuffle => 0x02,
            Stream::Dropout => 0x03,
            Stream::Sample => 0x04,
            Stream::Data => 0x05,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic RNG for `(seed, stream, counters...)`.
pub fn stream_rng(seed: u64, stream: Stream, counters: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ stream.tag().wrapping_mul(0xa076_1d64_78bd_642f));
    for &c in counters {
        state = splitmix64(state ^ c.wrapping_add(0x2545_f491_4f6c_dd1d));
    }
    ChaCha8Rng::seed_from_u64(state)
}
