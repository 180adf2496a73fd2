use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Real;
use crate::tensor::{numel, Shape, Tensor};

/// Normal(0, std) truncated to +-2 std by resampling.
pub fn trunc_normal<T: Real, R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Tensor<T> {
    let data = (0..numel(&shape))
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::from_f64(z * std);
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("numel matches")
}
