//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a 64-bit value mixed from a master seed and a stream path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of stream identifiers into a seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_0F5C_E4E5_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Same as [`derive`], truncated to the 32 bits stored in dataset records.
pub fn derive_u32(parts: &[u64]) -> u32 {
    (derive(parts) >> 32) as u32
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
