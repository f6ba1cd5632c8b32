//! Seeded random streams.
//!
//! Every stochastic quantity in the crate is drawn from a SplitMix64 stream
//! whose seed is derived from a root seed plus a string tag and integer path.
//! Streams for different components never overlap and the derivation is
//! platform independent, so a configuration fully determines every sample.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::SplitMix64;

pub type StreamRng = SplitMix64;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `root`, a tag and an index path.
pub fn derive_seed(root: u64, tag: &str, path: &[u64]) -> u64 {
    let mut h = mix(root.wrapping_add(GOLDEN));
    for b in tag.bytes() {
        h = mix(h ^ u64::from(b)).wrapping_add(GOLDEN);
    }
    for &p in path {
        h = mix(h ^ p).wrapping_add(GOLDEN);
    }
    h
}

pub fn stream(root: u64, tag: &str, path: &[u64]) -> StreamRng {
    SplitMix64::seed_from_u64(derive_seed(root, tag, path))
}

pub fn gaussian(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian_vec(rng: &mut StreamRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * gaussian(rng)).collect()
}

/// Uniform on `[-half_width, half_width)`.
pub fn uniform_vec(rng: &mut StreamRng, n: usize, half_width: f64) -> Vec<f64> {
    (0..n)
        .map(|_| half_width * (2.0 * rng.random::<f64>() - 1.0))
        .collect()
}

/// Fisher-Yates shuffle driven by the given stream.
pub fn shuffle<T>(rng: &mut StreamRng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
