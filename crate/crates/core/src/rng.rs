//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` whose seed is
//! derived from a root seed and a path of integer labels with a splitmix64
//! chain. Two calls with the same root and path always yield the same
//! stream, and distinct paths yield unrelated streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from `seed` and a sequence of labels.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

pub fn rng_for(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream labels used across the crate, so unrelated consumers never share a path.
pub mod stream {
    pub const GRAPH: u64 = 1;
    pub const FEATURES: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const TARGETS: u64 = 4;
    pub const INIT: u64 = 5;
    pub const DROPOUT: u64 = 6;
    pub const INPUT: u64 = 7;
    pub const PERTURBATION: u64 = 8;
    pub const GRADCHECK: u64 = 9;
    pub const SWEEP: u64 = 10;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn paths_are_reproducible_and_distinct() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
        let a: f64 = rng_for(3, &[4]).random();
        let b: f64 = rng_for(3, &[4]).random();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
