//! Seeded random number generation.
//!
//! Every random draw in the crate goes through ChaCha8 so runs are replayable
//! from a `(seed, stream)` pair. Independent sub-streams (per stage, per
//! Monte-Carlo chunk, ...) use ChaCha's 64-bit stream selector.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Identifier recorded in artifacts that store a seed.
pub const RNG_ALGORITHM: &str = "chacha8-stream";

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw on `[-bound, bound)`.
pub(crate) fn uniform_sym<R: rand::Rng>(rng: &mut R, bound: f64) -> f64 {
    (rng.random::<f64>() * 2.0 - 1.0) * bound
}
