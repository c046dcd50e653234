//! Seeded parameter initializers.

use rand::Rng;

use crate::real::Real;
use crate::tensor::Tensor;

/// Normal with standard deviation `sqrt(2 / fan_in)`.
pub fn kaiming<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}
