//! Deterministic random substreams.
//!
//! All simulation randomness is drawn from ChaCha8 streams keyed by
//! `(seed, stream)`; stream ids are built from a purpose tag plus block and
//! shard indices so independent work items never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Purpose tags occupy the top 16 bits of a stream id.
#[derive(Debug, Clone, Copy)]
#[repr(u16)]
pub enum Purpose {
    Pairs = 1,
    Darks = 2,
    Sync = 3,
    Lhv = 4,
    Drift = 5,
    Speckle = 6,
    Init = 7,
    Strategy = 8,
    Replication = 9,
}

pub fn stream_id(purpose: Purpose, block: u32, shard: u32) -> u64 {
    ((purpose as u64) << 48) | (((block as u64) & 0xFF_FFFF) << 24) | ((shard as u64) & 0xFF_FFFF)
}

pub fn substream(seed: u64, purpose: Purpose, block: u32, shard: u32) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(purpose, block, shard));
    rng
}

/// Derives an independent child seed; used where a whole sub-run (one
/// replication, one randomized strategy) needs its own seed space.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
