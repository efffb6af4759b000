use crate::scalar::Scalar;
use crate::tensor::Tensor;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Φ(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    x.map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()))
}

/// `dy * (Φ(x) + x φ(x))`.
pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64_lossy(0.5);
    let inv_sqrt2 = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let c = T::from_f64_lossy(FRAC_1_SQRT_2PI);
    x.zip_map(dy, |v, g| {
        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
        let pdf = c * (-half * v * v).exp();
        g * (cdf + v * pdf)
    })
}
