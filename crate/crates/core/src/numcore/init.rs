use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Uniform in `±1/√fan_in`, the default for conv and dense weights.
pub fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.random_range(-bound..bound))).collect();
    Tensor::parameter(shape, data).expect("shape matches data")
}

/// Standard-normal draws as a plain (non-tracking) tensor.
pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(v)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

pub fn zeros_param<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::parameter(shape, vec![T::zero(); shape.iter().product()]).expect("shape matches data")
}

pub fn ones_param<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::parameter(shape, vec![T::one(); shape.iter().product()]).expect("shape matches data")
}
