//! Seeded, versioned shuffling.
//!
//! Manifests must be reproducible across crate upgrades, so this does not go
//! through `rand`'s `SliceRandom` (whose index sampling may change between
//! releases). The algorithm is pinned: ChaCha8 seeded with `seed_from_u64`,
//! Fisher–Yates from the back, index drawn as `(next_u64 * (i + 1)) >> 64`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SHUFFLE_ALGORITHM: &str = "fisher-yates/chacha8/mulshift/v1";

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform index in `0..bound` (bound > 0).
pub fn draw_index<R: RngCore>(rng: &mut R, bound: usize) -> usize {
    ((rng.next_u64() as u128 * bound as u128) >> 64) as usize
}

pub fn shuffle_in_place<T, R: RngCore>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = draw_index(rng, i + 1);
        items.swap(i, j);
    }
}

pub fn shuffled_indices(len: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    shuffle_in_place(&mut idx, &mut rng_from_seed(seed));
    idx
}
