//! Seed derivation so every component draws from its own reproducible stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of stream labels.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, path))
}

/// Stream labels. Fixed so existing seeds stay reproducible.
pub mod tags {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const CLIENT_INIT: u64 = 4;
    pub const CLIENT_ROUND: u64 = 5;
    pub const EVAL: u64 = 6;
}

/// Point drawn uniformly from the unit sphere in `dim` dimensions.
pub fn unit_vector<T: Scalar>(rng: &mut impl Rng, dim: usize) -> Vec<T> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| T::of(x / n)).collect();
        }
    }
}

pub fn gaussian<T: Scalar>(rng: &mut impl Rng) -> T {
    T::of(rng.sample(StandardNormal))
}

/// Uniform draw from `[-bound, bound)`.
pub fn uniform_sym<T: Scalar>(rng: &mut impl Rng, bound: f64) -> T {
    T::of(rng.random_range(-bound..bound))
}
