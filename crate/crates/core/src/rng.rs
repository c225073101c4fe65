//! Seed derivation for reproducible, order-independent random streams.
//!
//! Every stochastic component draws from its own ChaCha stream whose seed is
//! a hash of `(master seed, agent id, purpose)`, so results do not depend on
//! the order in which agents or runs are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags keep streams of the same agent independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Dynamics,
    Exploration,
    Evaluation,
    Perturbation,
    Instances,
    Joint,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Dynamics => 0x01,
            Stream::Exploration => 0x02,
            Stream::Evaluation => 0x03,
            Stream::Perturbation => 0x04,
            Stream::Instances => 0x05,
            Stream::Joint => 0x06,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an arbitrary number of words into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(master: u64, agent: usize, purpose: Stream) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(&[master, agent as u64, purpose.tag()]))
}

pub fn stream_with(master: u64, agent: usize, purpose: Stream, extra: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(&[master, agent as u64, purpose.tag(), extra]))
}
