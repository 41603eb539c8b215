//! Seeded parameter initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Real, Tensor};

/// Deterministic source of initial values; same seed, same tensors.
#[derive(Clone, Debug)]
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            T::lit(z * std)
        })
    }

    /// Normal with standard deviation `std`, resampled outside `±2 std`.
    pub fn trunc_normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        })
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(lo..hi)))
    }
}
