//! Named deterministic RNG sub-streams, all derived from one master seed so
//! ablations differ only in the ablated parameter.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the stream name, mixed with the seed and an index.
fn mix(seed: u64, name: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= seed.wrapping_mul(0x9e3779b97f4a7c15);
    h = h.wrapping_mul(0x100000001b3);
    h ^= index.wrapping_add(0x632be59bd9b4e019);
    h.wrapping_mul(0x100000001b3)
}

/// A named sub-stream: `stream(seed, "init")`, `stream(seed, "sampling")`, ...
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, name, 0))
}

/// Indexed sub-stream, e.g. one per image or per epoch.
pub fn stream_n(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, name, index))
}
