use rand::Rng;

use crate::{Float, Tensor};

/// Kaiming-uniform (fan-in, ReLU gain): `U(−√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform<T: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}

/// Uniform `U(−bound, bound)`.
pub fn uniform<T: Float, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        if bound == 0.0 {
            T::zero()
        } else {
            T::from_f64_lossy(rng.gen_range(-bound..bound))
        }
    })
}
