use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::tensor::{Scalar, Tensor};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// GELU in the exact form `x * Phi(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        let v = v.f64();
        T::of(v * normal_cdf(v))
    })
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let inv_sqrt_2pi = 1.0 / (2.0 * PI).sqrt();
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let v = v.f64();
            let d = normal_cdf(v) + v * inv_sqrt_2pi * (-0.5 * v * v).exp();
            T::of(d) * g
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(x: f64) -> f64 {
        gelu(&Tensor::scalar(x)).item()
    }

    #[test]
    fn reference_points() {
        assert_eq!(at(0.0), 0.0);
        assert!((at(10.0) - 10.0).abs() < 1e-6);
        // Phi(1) = 0.8413447460685429
        assert!((at(1.0) - 0.841345).abs() < 1e-5);
        assert!(at(-10.0).abs() < 1e-6);
    }
}
