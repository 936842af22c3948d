//! Reproducible random streams.
//!
//! Every stochastic routine draws from a ChaCha8 generator keyed by a master
//! seed and a stream index, so per-window and per-trajectory work can run in
//! any order (or in parallel) and still produce identical output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Recorded in run manifests.
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.9, seed_from_u64 + set_stream)";

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
