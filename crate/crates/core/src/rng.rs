//! Reproducible random streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream identified by the
//! master seed plus a 64-bit stream id. Work is split into fixed-size chunks
//! that each own one stream, so results never depend on how many worker
//! threads happen to run the chunks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type CmsRng = ChaCha8Rng;

/// Default number of samples handled by one independent stream.
pub const CHUNK: usize = 4096;

/// Stream-id namespaces, one per consumer.
pub mod purpose {
    pub const CHAIN: u64 = 1;
    pub const VALIDATION: u64 = 2;
    pub const CONTRACTION: u64 = 3;
    pub const PUSH: u64 = 4;
    pub const OPERATOR: u64 = 5;
    pub const SYMBOLS: u64 = 6;
    pub const CODING_SOURCE: u64 = 7;
    pub const LEMMA2_SOURCE: u64 = 8;
}

pub fn stream(seed: u64, purpose: u64, index: u64) -> CmsRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 40) ^ index);
    rng
}
