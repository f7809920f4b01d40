//! Seedable counter-based random streams.
//!
//! Every random draw in the sampler comes from a ChaCha stream keyed by
//! `(seed, phase, iteration)` with the stream id set to a pixel, band or
//! endmember index. Results therefore do not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type CsuRng = ChaCha8Rng;

/// Sampler phases; each gets its own key space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Phase {
    Init = 1,
    Labels = 2,
    Abundances = 3,
    Noise = 4,
    Scales = 5,
    Beta = 6,
    Prior = 7,
    Scene = 8,
    Library = 9,
}

/// Independent stream for `(seed, phase, iteration, index)`.
pub fn substream(seed: u64, phase: Phase, iteration: u64, index: u64) -> CsuRng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(phase as u64).to_le_bytes());
    key[16..24].copy_from_slice(&iteration.to_le_bytes());
    key[24..32].copy_from_slice(&0x6373_755f_726e_6721u64.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// A plain seeded generator for user-facing one-off draws.
pub fn seeded(seed: u64) -> CsuRng {
    ChaCha8Rng::seed_from_u64(seed)
}
