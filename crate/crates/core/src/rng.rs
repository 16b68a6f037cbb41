//! Counter-based random streams.
//!
//! Every unit of stochastic work (a simulated path, a Gram trial, a Monte
//! Carlo batch) owns a ChaCha8 stream selected from a master seed by an
//! integer index, so results do not depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purposes multiplexed onto a single index so that, for example, the
/// initial-condition draws and the Brownian increments of path `i` never
/// share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Initial = 0,
    Noise = 1,
    PilotInitial = 2,
    PilotNoise = 3,
    Sampling = 4,
    Trial = 5,
}

const PURPOSES: u64 = 8;

/// The stream for `(seed, index, purpose)`.
pub fn stream(seed: u64, index: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(PURPOSES).wrapping_add(purpose as u64));
    rng
}
