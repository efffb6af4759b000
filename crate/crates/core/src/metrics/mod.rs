//! Training loss and evaluation metrics.

mod fid;
mod lpips;

pub use fid::{fid, gaussian_stats, FidResult, FID_EPS};
pub use lpips::{lpips_distance, lpips_with_grad, ConvExtractor, FeatureExtractor, IdentityExtractor, NORM_EPS};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{blend, blend_backward};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mixing weights of the hybrid objective
/// `(1 − alpha)·L1 + alpha·L2 + lpips_weight·LPIPS`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub lpips_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.5, lpips_weight: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.lpips_weight >= 0.0 && self.lpips_weight.is_finite()) {
            return Err(Error::Config(format!("lpips_weight must be >= 0, got {}", self.lpips_weight)));
        }
        Ok(())
    }
}

/// Mean absolute error.
pub fn l1_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    a.same_shape(b, "l1_loss")?;
    let s: T = a.data().iter().zip(b.data()).map(|(&p, &q)| (p - q).abs()).sum();
    Ok(s / T::from_usize(a.len()).unwrap())
}

/// Mean squared error.
pub fn l2_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    a.same_shape(b, "l2_loss")?;
    let s: T = a.data().iter().zip(b.data()).map(|(&p, &q)| (p - q) * (p - q)).sum();
    Ok(s / T::from_usize(a.len()).unwrap())
}

/// Per-term values of one hybrid-loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub l1: T,
    pub l2: T,
    pub lpips: T,
}

/// Hybrid loss of the composite `x ⊙ m + ŷ ⊙ (1 − m)` against `target`,
/// where the known pixels are taken from `target`.
pub fn hybrid_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &Tensor<T>,
    w: &LossWeights,
    fx: &dyn FeatureExtractor<T>,
) -> Result<LossBreakdown<T>> {
    Ok(hybrid_loss_with_grad(pred, target, mask, w, fx, false)?.0)
}

/// As [`hybrid_loss`], plus the gradient with respect to `pred` when asked.
pub fn hybrid_loss_with_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &Tensor<T>,
    w: &LossWeights,
    fx: &dyn FeatureExtractor<T>,
    want_grad: bool,
) -> Result<(LossBreakdown<T>, Option<Tensor<T>>)> {
    w.validate()?;
    let y = blend(target, mask, pred)?;
    let alpha = T::from_f64_lossy(w.alpha);
    let wl = T::from_f64_lossy(w.lpips_weight);
    let one = T::one();
    let l1 = l1_loss(&y, target)?;
    let l2 = l2_loss(&y, target)?;
    let (lp, dlp) = if w.lpips_weight > 0.0 { lpips_with_grad(&y, target, fx, want_grad)? } else { (T::zero(), None) };
    let total = (one - alpha) * l1 + alpha * l2 + wl * lp;
    let breakdown = LossBreakdown { total, l1, l2, lpips: lp };
    if !want_grad {
        return Ok((breakdown, None));
    }
    let n = T::from_usize(y.len()).unwrap();
    let c1 = (one - alpha) / n;
    let c2 = T::from_f64_lossy(2.0) * alpha / n;
    let mut dy = y.zip_map(target, |p, q| {
        let d = p - q;
        let sign = if d > T::zero() {
            one
        } else if d < T::zero() {
            -one
        } else {
            T::zero()
        };
        c1 * sign + c2 * d
    });
    if let Some(g) = dlp {
        dy.add_assign(&g.scale(wl));
    }
    Ok((breakdown, Some(blend_backward(mask, &dy))))
}

/// Peak signal-to-noise ratio for images in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    /// The images are identical; the ratio is unbounded.
    Exact,
    Db(f64),
}

impl Psnr {
    pub fn db(self) -> f64 {
        match self {
            Psnr::Exact => f64::INFINITY,
            Psnr::Db(v) => v,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Exact => f.write_str("exact"),
            Psnr::Db(v) => write!(f, "{v:.3} dB"),
        }
    }
}

pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Psnr> {
    let mse = l2_loss(a, b)?.as_f64();
    Ok(if mse == 0.0 { Psnr::Exact } else { Psnr::Db(-10.0 * mse.log10()) })
}

/// One feature vector per batch item: every extractor layer averaged over
/// positions, layers concatenated. These are the rows fed to [`fid`].
pub fn pooled_features<T: Scalar>(x: &Tensor<T>, fx: &dyn FeatureExtractor<T>) -> Result<Vec<Vec<f64>>> {
    let layers = fx.extract(x)?;
    let n = x.dims4().0;
    let mut rows = vec![Vec::new(); n];
    for layer in &layers {
        let (_, c, h, w) = layer.dims4();
        let hw = h * w;
        for (b, row) in rows.iter_mut().enumerate() {
            let img = layer.image(b);
            for ch in 0..c {
                let s: f64 = img[ch * hw..(ch + 1) * hw].iter().map(|v| v.as_f64()).sum();
                row.push(s / hw as f64);
            }
        }
    }
    Ok(rows)
}
