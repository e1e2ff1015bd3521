//! Seeded randomness shared by every module.
//!
//! Generator: ChaCha8 (`rand_chacha` 0.9). A `u64` seed becomes the 32-byte
//! key `seed.to_le_bytes() ++ [0; 24]`, so streams are reproducible from
//! the seed alone. Permutations use [`shuffle`], an explicit Fisher-Yates
//! loop, rather than `rand`'s slice helpers whose algorithm may change
//! between releases.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Derives an independent stream seed from a base seed and a tag (splitmix64 finaliser).
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform index in `0..bound` by Lemire's multiply-shift (no rejection step).
pub fn index(rng: &mut Rng, bound: usize) -> usize {
    debug_assert!(bound > 0);
    ((rng.next_u64() as u128 * bound as u128) >> 64) as usize
}

/// In-place Fisher-Yates: for `i` from `len-1` down to 1, swap `i` with `index(rng, i+1)`.
pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = index(rng, i + 1);
        items.swap(i, j);
    }
}

pub fn normal(rng: &mut Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

/// One Dirichlet(alpha, ..., alpha) draw of dimension `k`, via normalised Gamma(alpha, 1) draws.
/// Redraws when every component underflows to zero.
pub fn dirichlet(rng: &mut Rng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0 checked by caller");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}
