//! Seeded random-number substreams.
//!
//! Every source of randomness in a run is derived from one 64-bit master
//! seed plus a stream name ("data", "init", "sampling", ...), so any stage
//! can be reproduced in isolation and full runs are bit-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used everywhere in the engine.
pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the named substream of `master_seed`.
///
/// The same (seed, name) pair always yields the same generator; distinct
/// names yield statistically independent streams.
pub fn substream(master_seed: u64, name: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(master_seed ^ fnv1a(name.as_bytes())))
}

/// Derive an indexed substream, e.g. one per task or per expert.
pub fn substream_indexed(master_seed: u64, name: &str, index: u64) -> Rng {
    let base = splitmix64(master_seed ^ fnv1a(name.as_bytes()));
    ChaCha8Rng::seed_from_u64(splitmix64(base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}
