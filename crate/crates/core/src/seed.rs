//! Named, order-independent seed streams.
//!
//! Every stochastic choice in a run draws from a generator seeded by
//! `derive(master, stream, a, b)`, so results do not depend on which worker
//! executes what, or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Synth = 1,
    Split = 2,
    Partition = 3,
    Backbone = 4,
    Head = 5,
    Sampling = 6,
    AdapterInit = 7,
    Shuffle = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(master);
    for word in [stream as u64, a, b] {
        h = splitmix64(h ^ word);
    }
    h
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: Stream, a: u64, b: u64) -> Rng {
    rng(derive(master, stream, a, b))
}
