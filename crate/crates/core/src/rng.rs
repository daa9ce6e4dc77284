//! Seeded random streams.
//!
//! Every stochastic routine takes a caller-supplied RNG. Parallel work
//! (Monte Carlo replicates, resampling repetitions) derives one independent
//! ChaCha stream per work item from a 64-bit seed, so results never depend
//! on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// RNG seeded from `seed`, on the default stream.
pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// RNG seeded from `seed` on ChaCha stream `stream`. Distinct streams of the
/// same seed are statistically independent.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for Monte Carlo replicate `replicate` of a run seeded with `seed`.
pub fn replicate_seed(seed: u64, replicate: u64) -> u64 {
    seed ^ replicate
}
