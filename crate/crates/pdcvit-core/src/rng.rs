//! Seeded randomness. Every stochastic step in the workspace draws from a
//! `Prng` seeded explicitly, so runs are reproducible bit-for-bit.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// The one generator used everywhere. ChaCha12 is a pinned algorithm, so
/// seeds reproduce across builds and platforms.
pub type Prng = rand_chacha::ChaCha12Rng;

pub fn seeded(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Derives a stable per-component seed from a base seed and a name tag.
///
/// FNV-1a over the tag, mixed with the base through splitmix64. Components
/// keyed by name get identical init streams regardless of which other
/// components exist in a given model variant.
pub fn component_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(base ^ h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Normal(0, sigma) truncated to two standard deviations by resampling.
pub fn trunc_normal(shape: &[usize], sigma: f64, rng: &mut Prng) -> Tensor {
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and positive");
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let z = normal.sample(rng);
        if crate::math::abs(z) <= 2.0 * sigma {
            data.push(z);
        }
    }
    Tensor::from_vec(shape, data).expect("length matches by construction")
}

/// Uniform samples in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Prng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("length matches by construction")
}
