//! Seeded RNG streams.
//!
//! Every stochastic component (env resets, batch sampling, planner noise,
//! rollout mixing, init) draws from its own named stream derived from the run
//! seed, so reordering work in one component never perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the stream name, mixed with the seed.
fn mix(seed: u64, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in stream.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Derive an independent RNG for `stream` from the run seed.
pub fn stream(seed: u64, stream_name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream_name))
}

/// Derive a per-index RNG, e.g. one per evaluation episode.
pub fn indexed_stream(seed: u64, stream_name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream_name).wrapping_add(index.wrapping_mul(0x2545_f491_4f6c_dd1d)))
}
