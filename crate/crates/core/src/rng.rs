//! Seed fan-out. Every consumer draws from its own ChaCha stream keyed by the
//! run seed, so adding a consumer never shifts another consumer's numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod stream {
    pub const SYNTH_PARAMS: u64 = 1;
    pub const SYNTH_NOISE: u64 = 2;
    pub const NET_INIT: u64 = 3;
    pub const MUTATION: u64 = 4;
    pub const FUZZ: u64 = 5;
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for the `index`-th member of a family (e.g. one per shift).
pub fn substream(stream: u64, index: u64) -> u64 {
    (stream << 32) | index
}
