//! Seed splitting.
//!
//! Every random stream in the simulator is a `ChaCha8Rng` seeded with
//! `derive(parent, path)`, where `derive` folds each path element into the
//! parent through the SplitMix64 finalizer. Streams therefore depend only on
//! their path, never on the order in which other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(parent: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix(parent.wrapping_add(GOLDEN)), |acc, &p| {
            mix(acc ^ mix(p.wrapping_add(GOLDEN)))
        })
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags used as the first path element.
pub mod tag {
    pub const CENTER: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const PHANTOM: u64 = 4;
    pub const SPLIT: u64 = 5;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_path_sensitive() {
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
        assert_ne!(derive(7, &[1, 2]), derive(7, &[2, 1]));
        assert_ne!(derive(7, &[1]), derive(8, &[1]));
        assert_ne!(derive(7, &[]), derive(7, &[0]));
    }
}
