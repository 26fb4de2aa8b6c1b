//! Named random sub-streams derived from a single run seed.
//!
//! Every stochastic component (split, shuffle, init, eps, ...) draws from its
//! own stream so that adding draws in one component never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic generator for the sub-stream `name` of `seed`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(name.as_bytes()).rotate_left(17)))
}

/// Like [`stream`], further keyed by an index (epoch, document, ...).
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> StreamRng {
    let base = splitmix64(seed ^ fnv1a(name.as_bytes()).rotate_left(17));
    ChaCha8Rng::seed_from_u64(splitmix64(base ^ splitmix64(index.wrapping_add(1))))
}
