//! Seeded parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub type FocalRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> FocalRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream of the same seed, e.g. for sampling inputs without
/// disturbing the weight stream.
pub fn rng_for_stream(seed: u64, stream: u64) -> FocalRng {
    let mut rng = rng_from_seed(seed);
    rng.set_stream(stream);
    rng
}

pub const INIT_STD: f64 = 0.02;

/// Normal(0, std) resampled until it lands within two standard deviations.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

pub fn uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}
