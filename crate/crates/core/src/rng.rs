//! Deterministic seed derivation.
//!
//! Every stochastic step (a training step, a group, a sweep cell) gets its own
//! generator derived from the run seed and a stream path, so results do not
//! depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, path))
}

/// Stream tags, so different consumers of the same seed never collide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const TRAIN_STEP: u64 = 2;
    pub const JUDGE_STEP: u64 = 3;
    pub const EVAL_GROUP: u64 = 4;
    pub const DIVERSITY: u64 = 5;
    pub const WORLD: u64 = 6;
    pub const SWEEP_CELL: u64 = 7;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).gen();
        let b: u64 = stream(7, &[1, 2]).gen();
        let c: u64 = stream(7, &[2, 1]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
