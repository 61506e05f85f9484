//! Seeded random streams.
//!
//! Every parallel unit of work (a block of chains, a block of rejection
//! samples) draws from its own ChaCha stream keyed by `(seed, stream)`, so
//! results do not depend on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed from a parent seed and a label; used to give
/// independent stages of a pipeline unrelated randomness.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    // SplitMix64 finalizer.
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
