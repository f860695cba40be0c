//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{numel, Real, Tensor};

/// Normal(0, std) truncated to ±2·std by rejection.
pub fn trunc_normal<T: Real, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::from_f64(z * std);
        }
    })
}

/// Normal(0, std), untruncated.
pub fn normal<T: Real, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64(z * std)
    })
}

/// Uniform samples in `[-half_width, half_width]`; all zeros when the
/// width is zero (no random draws are consumed in that case).
pub fn uniform<R: Rng>(shape: &[usize], half_width: f64, rng: &mut R) -> Vec<f64> {
    let n = numel(shape);
    if half_width == 0.0 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|_| rng.gen_range(-half_width..=half_width))
        .collect()
}
