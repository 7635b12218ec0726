//! Seeded random-number substreams.
//!
//! All randomness in an experiment flows from one global seed; each consumer
//! (data shuffling, gate sampling, parameter init, controller) derives its
//! own named stream so that adding draws to one consumer never perturbs the
//! others.

use rand::rngs::StdRng;
use rand::SeedableRng;

/// Derives a deterministic substream from (seed, name).
pub fn substream(seed: u64, name: &str) -> StdRng {
    StdRng::seed_from_u64(mix(seed, name))
}

/// Derives a substream further keyed by an index (worker id, epoch, grid
/// point).
pub fn substream_indexed(seed: u64, name: &str, index: u64) -> StdRng {
    StdRng::seed_from_u64(splitmix(mix(seed, name) ^ splitmix(index)))
}

fn mix(seed: u64, name: &str) -> u64 {
    splitmix(seed ^ fnv1a(name.as_bytes()))
}

// FNV-1a; stable across platforms and rust versions, unlike DefaultHasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
