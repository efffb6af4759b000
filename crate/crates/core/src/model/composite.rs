use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mask tensors are `(n, 1, h, w)` with every value exactly 0 or 1.
pub fn validate_mask<T: Scalar>(mask: &Tensor<T>) -> Result<()> {
    let (_, c, _, _) = mask.expect_rank4("mask")?;
    if c != 1 {
        return shape_err(format!("mask must have 1 channel, got {c}"));
    }
    if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::Shape("mask values must be exactly 0 or 1".into()));
    }
    Ok(())
}

fn select<T: Scalar>(x: &Tensor<T>, mask: &Tensor<T>, pred: &Tensor<T>, fill: impl Fn(T) -> T) -> Result<Tensor<T>> {
    x.same_shape(pred, "composite")?;
    let (n, c, h, w) = x.expect_rank4("composite")?;
    if mask.shape() != [n, 1, h, w] {
        return shape_err(format!("mask {:?} does not match image {:?}", mask.shape(), x.shape()));
    }
    validate_mask(mask)?;
    let hw = h * w;
    let mut out = x.clone();
    for b in 0..n {
        let m = mask.image(b);
        let p = pred.image(b);
        let o = out.image_mut(b);
        for ch in 0..c {
            for i in 0..hw {
                if m[i] == T::zero() {
                    o[ch * hw + i] = fill(p[ch * hw + i]);
                }
            }
        }
    }
    Ok(out)
}

/// Final inpainted image `y = x ⊙ m + clamp(ŷ, 0, 1) ⊙ (1 − m)`.
///
/// Known pixels are copied from `x`, so they are bit-identical to the input
/// whatever `ŷ` holds.
pub fn composite<T: Scalar>(x: &Tensor<T>, mask: &Tensor<T>, y_hat: &Tensor<T>) -> Result<Tensor<T>> {
    select(x, mask, y_hat, |v| v.max(T::zero()).min(T::one()))
}

/// Training-time composite without the clamp, `x ⊙ m + ŷ ⊙ (1 − m)`, so the
/// loss stays differentiable in ŷ everywhere.
pub fn blend<T: Scalar>(x: &Tensor<T>, mask: &Tensor<T>, y_hat: &Tensor<T>) -> Result<Tensor<T>> {
    select(x, mask, y_hat, |v| v)
}

/// Gradient of [`blend`] with respect to ŷ: `dy ⊙ (1 − m)`.
pub fn blend_backward<T: Scalar>(mask: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dy.dims4();
    let hw = h * w;
    let mut out = dy.clone();
    for b in 0..n {
        let m = mask.image(b);
        let o = out.image_mut(b);
        for ch in 0..c {
            for i in 0..hw {
                if m[i] != T::zero() {
                    o[ch * hw + i] = T::zero();
                }
            }
        }
    }
    out
}
