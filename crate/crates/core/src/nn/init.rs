use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Scalar, Tensor};

/// Seeded generator shared by all initializers.
pub type InitRng = ChaCha8Rng;

pub fn init_rng(seed: u64) -> InitRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// He-normal draws: zero mean, standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut InitRng) -> Tensor<T> {
    assert!(fan_in >= 1, "fan_in must be positive");
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::lit(z * std)
    })
}

/// [`he_normal`] from a fresh generator seeded with `seed`.
pub fn he_init<T: Scalar>(shape: &[usize], fan_in: usize, seed: u64) -> Tensor<T> {
    he_normal(shape, fan_in, &mut init_rng(seed))
}

pub fn zero_bias<T: Scalar>(len: usize) -> Tensor<T> {
    Tensor::zeros(&[len])
}
