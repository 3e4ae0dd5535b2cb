//! Seed derivation and deterministic random streams.
//!
//! Every stochastic operation takes an explicit seed; per-sample streams are
//! derived from `(base_seed, index)` so batch results do not depend on
//! thread scheduling.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

/// SplitMix64 finalizer; good avalanche for seed mixing.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a stream index into an independent sub-seed.
pub fn derive_seed(base_seed: u64, index: u64) -> u64 {
    splitmix64(base_seed ^ splitmix64(index.wrapping_add(1)))
}

/// Deterministic random stream for a given seed.
pub fn stream(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Deterministic random stream for `(base_seed, index)`.
pub fn substream(base_seed: u64, index: u64) -> ChaCha12Rng {
    stream(derive_seed(base_seed, index))
}
