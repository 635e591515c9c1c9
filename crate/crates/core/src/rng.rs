//! Seeded random sources.
//!
//! Every stochastic operation in the crate draws from a [`SeededRng`] built
//! from an explicit `u64` seed, so any run is replayable bit for bit.

use rand_chacha::ChaCha8Rng;

/// The random source used throughout the crate.
pub type SeededRng = ChaCha8Rng;

/// Build a random source from a seed.
pub fn seeded(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a child seed from a parent seed and a stream index.
///
/// SplitMix64 finalizer; distinct (seed, stream) pairs give well-spread
/// child seeds without the streams sharing a prefix.
pub fn child_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
