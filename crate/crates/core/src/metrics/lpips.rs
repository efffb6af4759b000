//! Perceptual distance over a pluggable feature extractor.

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, HasParams, ParamSpec};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Added to feature norms before channel normalization.
pub const NORM_EPS: f64 = 1e-10;

/// Maps an image batch to a list of feature layers, each compared after
/// unit-normalizing its channel vector at every position.
pub trait FeatureExtractor<T: Scalar>: Send + Sync {
    /// Weight of each layer in the distance; its length is the layer count.
    fn layer_weights(&self) -> Vec<T>;

    fn extract(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>>;

    /// Vector-Jacobian product: gradient with respect to `x` given the
    /// gradient with respect to every layer output.
    fn backward(&self, x: &Tensor<T>, dfeatures: &[Tensor<T>]) -> Result<Tensor<T>>;
}

/// The image itself as the single feature layer, weight 1.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl<T: Scalar> FeatureExtractor<T> for IdentityExtractor {
    fn layer_weights(&self) -> Vec<T> {
        vec![T::one()]
    }

    fn extract(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![x.clone()])
    }

    fn backward(&self, _x: &Tensor<T>, dfeatures: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(dfeatures[0].clone())
    }
}

/// Stack of 3×3 convolutions with ReLU; every ReLU output is a feature layer.
/// Weights come from outside (see the checkpoint loader).
#[derive(Clone, Debug)]
pub struct ConvExtractor<T> {
    layers: Vec<Conv2d>,
    weights: Vec<T>,
    params: ParameterStore<T>,
}

impl<T: Scalar> ConvExtractor<T> {
    /// `channels[i] → channels[i+1]` with `strides[i]`, padding 1.
    pub fn new(
        channels: &[usize],
        strides: &[usize],
        layer_weights: Vec<T>,
        params: ParameterStore<T>,
    ) -> Result<Self> {
        if channels.len() < 2 || strides.len() != channels.len() - 1 || layer_weights.len() != strides.len() {
            return Err(Error::Config(format!(
                "conv extractor: {} channel entries, {} strides, {} layer weights",
                channels.len(),
                strides.len(),
                layer_weights.len()
            )));
        }
        let layers: Vec<Conv2d> = strides
            .iter()
            .enumerate()
            .map(|(i, &s)| Conv2d::new(format!("layers.{i}"), channels[i], channels[i + 1], 3, s, 1))
            .collect();
        for l in &layers {
            for spec in l.param_specs() {
                let t = params.get(&spec.name)?;
                if t.shape() != spec.shape.as_slice() {
                    return shape_err(format!("{}: expected {:?}, found {:?}", spec.name, spec.shape, t.shape()));
                }
            }
        }
        Ok(ConvExtractor { layers, weights: layer_weights, params })
    }

    pub fn param_specs(channels: &[usize], strides: &[usize]) -> Vec<ParamSpec> {
        strides
            .iter()
            .enumerate()
            .flat_map(|(i, &s)| Conv2d::new(format!("layers.{i}"), channels[i], channels[i + 1], 3, s, 1).param_specs())
            .collect()
    }

    fn run(&self, x: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for l in &self.layers {
            let z = l.forward(&self.params, &cur)?;
            cur = z.map(|v| v.max(T::zero()));
            pre.push(z);
            post.push(cur.clone());
        }
        Ok((pre, post))
    }
}

impl<T: Scalar> FeatureExtractor<T> for ConvExtractor<T> {
    fn layer_weights(&self) -> Vec<T> {
        self.weights.clone()
    }

    fn extract(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.run(x)?.1)
    }

    fn backward(&self, x: &Tensor<T>, dfeatures: &[Tensor<T>]) -> Result<Tensor<T>> {
        let (pre, post) = self.run(x)?;
        let mut scratch = ParameterStore::new();
        let mut carry: Option<Tensor<T>> = None;
        for i in (0..self.layers.len()).rev() {
            let mut d = dfeatures[i].clone();
            if let Some(c) = carry.take() {
                d.add_assign(&c);
            }
            let dz = pre[i].zip_map(&d, |z, g| if z > T::zero() { g } else { T::zero() });
            let input = if i == 0 { x } else { &post[i - 1] };
            carry = Some(self.layers[i].backward(&self.params, input, &dz, &mut scratch)?);
        }
        Ok(carry.expect("at least one layer"))
    }
}

/// Channel-normalized features: per position `f / (‖f‖ + eps)`, plus the
/// norms for the backward pass.
fn normalize<T: Scalar>(f: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let (n, c, h, w) = f.dims4();
    let hw = h * w;
    let eps = T::from_f64_lossy(NORM_EPS);
    let mut out = f.clone();
    let mut norms = vec![T::zero(); n * hw];
    for b in 0..n {
        let src = f.image(b);
        for p in 0..hw {
            let s: T = (0..c).map(|ch| src[ch * hw + p] * src[ch * hw + p]).sum();
            norms[b * hw + p] = s.sqrt();
        }
        let dst = out.image_mut(b);
        for ch in 0..c {
            for p in 0..hw {
                dst[ch * hw + p] = src[ch * hw + p] / (norms[b * hw + p] + eps);
            }
        }
    }
    (out, norms)
}

/// `Σ_l w_l · mean over positions of ‖f̂_l(a) − f̂_l(b)‖²`.
pub fn lpips_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, fx: &dyn FeatureExtractor<T>) -> Result<T> {
    Ok(lpips_with_grad(a, b, fx, false)?.0)
}

/// Distance and, if requested, its gradient with respect to `a`.
pub fn lpips_with_grad<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    fx: &dyn FeatureExtractor<T>,
    want_grad: bool,
) -> Result<(T, Option<Tensor<T>>)> {
    a.same_shape(b, "lpips")?;
    let fa = fx.extract(a)?;
    let fb = fx.extract(b)?;
    let weights = fx.layer_weights();
    if fa.len() != weights.len() || fb.len() != weights.len() {
        return Err(Error::Config("feature extractor layer count mismatch".into()));
    }
    let eps = T::from_f64_lossy(NORM_EPS);
    let two = T::from_f64_lossy(2.0);
    let mut total = T::zero();
    let mut dfeat = Vec::with_capacity(fa.len());
    for ((la, lb), &wl) in fa.iter().zip(&fb).zip(&weights) {
        let (n, c, h, w) = la.dims4();
        let hw = h * w;
        let positions = T::from_usize(n * hw).unwrap();
        let (na, norms_a) = normalize(la);
        let (nb, _) = normalize(lb);
        let diff = na.zip_map(&nb, |p, q| p - q);
        total += wl * diff.sum_squares() / positions;
        if !want_grad {
            continue;
        }
        // d/du of u/(‖u‖+eps) applied to g = 2 w (â - b̂) / P
        let mut grad = Tensor::zeros(la.shape());
        for bi in 0..n {
            let u = la.image(bi);
            let d = diff.image(bi);
            let gi = grad.image_mut(bi);
            for p in 0..hw {
                let nrm = norms_a[bi * hw + p];
                let denom = nrm + eps;
                let scale = two * wl / positions;
                let mut ud = T::zero();
                for ch in 0..c {
                    ud += u[ch * hw + p] * d[ch * hw + p];
                }
                let radial = if nrm > T::zero() { ud / (nrm * denom * denom) } else { T::zero() };
                for ch in 0..c {
                    let k = ch * hw + p;
                    gi[k] = scale * (d[k] / denom - u[k] * radial);
                }
            }
        }
        dfeat.push(grad);
    }
    let grad = if want_grad { Some(fx.backward(a, &dfeat)?) } else { None };
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn zero_for_identical_and_symmetric() {
        let a = img(1, &[1, 3, 5, 4]);
        let b = img(2, &[1, 3, 5, 4]);
        assert_eq!(lpips_distance(&a, &a, &IdentityExtractor).unwrap(), 0.0);
        let ab = lpips_distance(&a, &b, &IdentityExtractor).unwrap();
        let ba = lpips_distance(&b, &a, &IdentityExtractor).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn identity_extractor_matches_hand_loop() {
        let (h, w) = (3, 4);
        let a = img(3, &[1, 3, h, w]);
        let b = img(4, &[1, 3, h, w]);
        let mut acc = 0.0;
        for p in 0..h * w {
            let va: Vec<f64> = (0..3).map(|c| a.data()[c * h * w + p]).collect();
            let vb: Vec<f64> = (0..3).map(|c| b.data()[c * h * w + p]).collect();
            let na = va.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_EPS;
            let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_EPS;
            acc += (0..3).map(|c| (va[c] / na - vb[c] / nb).powi(2)).sum::<f64>();
        }
        let expect = acc / (h * w) as f64;
        let got = lpips_distance(&a, &b, &IdentityExtractor).unwrap();
        assert!((got - expect).abs() < 1e-14);
    }

    fn check_grad(fx: &dyn FeatureExtractor<f64>, shape: &[usize]) {
        let a = img(5, shape).map(|v| v + 0.1);
        let b = img(6, shape).map(|v| v + 0.1);
        let (_, g) = lpips_with_grad(&a, &b, fx, true).unwrap();
        let g = g.unwrap();
        let h = 1e-6;
        for i in (0..a.len()).step_by(7) {
            let mut ap = a.clone();
            ap.data_mut()[i] += h;
            let mut am = a.clone();
            am.data_mut()[i] -= h;
            let fd = (lpips_distance(&ap, &b, fx).unwrap() - lpips_distance(&am, &b, fx).unwrap()) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-6 * fd.abs().max(1.0), "i={i}: {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn identity_gradient() {
        check_grad(&IdentityExtractor, &[2, 3, 4, 4]);
    }

    #[test]
    fn conv_extractor_gradient() {
        let channels = [3, 4, 5];
        let strides = [1, 2];
        let specs = ConvExtractor::<f64>::param_specs(&channels, &strides);
        let params = init_params(&specs, &mut ChaCha8Rng::seed_from_u64(9));
        let fx = ConvExtractor::new(&channels, &strides, vec![0.5, 1.5], params).unwrap();
        check_grad(&fx, &[1, 3, 6, 6]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = img(1, &[1, 3, 4, 4]);
        let b = img(1, &[1, 3, 4, 2]);
        assert!(matches!(lpips_distance(&a, &b, &IdentityExtractor), Err(Error::Shape(_))));
    }
}
