//! Seeding helpers. All randomness flows from one global seed via named
//! sub-streams so that every module draws from an independent, reproducible
//! stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used only to fold stream labels into seeds. Stable across
/// platforms and Rust versions, unlike the std hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic RNG for the sub-stream `label` of `global_seed`.
pub fn sub_stream(global_seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(global_seed ^ fnv1a(label.as_bytes()))
}
