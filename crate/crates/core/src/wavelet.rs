//! Orthonormal 2D Haar wavelet transform.
//!
//! For every 2×2 input block `[[a, b], [c, d]]` and every channel:
//!
//! ```text
//! ll = (a + b + c + d) / 2    lh = (a + b - c - d) / 2
//! hl = (a - b + c - d) / 2    hh = (a - b - c + d) / 2
//! ```
//!
//! The transform matrix is orthogonal and symmetric, so it is its own
//! inverse and also its own adjoint: the backward pass of [`dwt2_haar`] is
//! [`idwt2_haar`] applied to the subband gradients.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One level of decomposition. All four bands share the shape
/// `(n, c, h/2, w/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet<T> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Scalar> SubbandSet<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        let z = Tensor::zeros(&[n, c, h, w]);
        SubbandSet { ll: z.clone(), lh: z.clone(), hl: z.clone(), hh: z }
    }

    fn check(&self) -> Result<(usize, usize, usize, usize)> {
        let d = self.ll.expect_rank4("subband ll")?;
        for (name, band) in [("lh", &self.lh), ("hl", &self.hl), ("hh", &self.hh)] {
            if band.shape() != self.ll.shape() {
                return shape_err(format!("subband {name} has shape {:?}, ll has {:?}", band.shape(), self.ll.shape()));
            }
        }
        Ok(d)
    }

    /// Stacks the bands along channels in `(ll, lh, hl, hh)` order.
    pub fn to_channels(&self) -> Result<Tensor<T>> {
        self.check()?;
        Tensor::cat_channels(&[&self.ll, &self.lh, &self.hl, &self.hh])
    }

    /// Inverse of [`SubbandSet::to_channels`].
    pub fn from_channels(t: &Tensor<T>) -> Result<Self> {
        let (_, c, _, _) = t.expect_rank4("subband stack")?;
        if c % 4 != 0 {
            return shape_err(format!("subband stack needs a multiple of 4 channels, got {c}"));
        }
        let q = c / 4;
        let mut parts = t.split_channels(&[q, q, q, q]).into_iter();
        Ok(SubbandSet {
            ll: parts.next().unwrap(),
            lh: parts.next().unwrap(),
            hl: parts.next().unwrap(),
            hh: parts.next().unwrap(),
        })
    }

    pub fn energy(&self) -> T {
        self.ll.sum_squares() + self.lh.sum_squares() + self.hl.sum_squares() + self.hh.sum_squares()
    }
}

/// Single-level forward transform of a rank-4 tensor with even `h` and `w`.
pub fn dwt2_haar<T: Scalar>(x: &Tensor<T>) -> Result<SubbandSet<T>> {
    let (n, c, h, w) = x.expect_rank4("dwt2_haar")?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("dwt2_haar needs even spatial dims, got {h}x{w}"));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("dwt2_haar input".into()));
    }
    Ok(dwt2_unchecked(x, n, c, h, w))
}

pub(crate) fn dwt2_unchecked<T: Scalar>(x: &Tensor<T>, n: usize, c: usize, h: usize, w: usize) -> SubbandSet<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = SubbandSet::zeros(n, c, ho, wo);
    let s = T::from_f64_lossy(0.5);
    let src = x.data();
    let SubbandSet { ll, lh, hl, hh } = &mut out;
    let (ll, lh, hl, hh) = (ll.data_mut(), lh.data_mut(), hl.data_mut(), hh.data_mut());
    for plane in 0..n * c {
        let ib = plane * h * w;
        let ob = plane * ho * wo;
        for i in 0..ho {
            let r0 = ib + 2 * i * w;
            let r1 = r0 + w;
            for j in 0..wo {
                let a = src[r0 + 2 * j];
                let b = src[r0 + 2 * j + 1];
                let cc = src[r1 + 2 * j];
                let d = src[r1 + 2 * j + 1];
                let o = ob + i * wo + j;
                ll[o] = (a + b + cc + d) * s;
                lh[o] = (a + b - cc - d) * s;
                hl[o] = (a - b + cc - d) * s;
                hh[o] = (a - b - cc + d) * s;
            }
        }
    }
    out
}

/// Exact inverse of [`dwt2_haar`].
pub fn idwt2_haar<T: Scalar>(s: &SubbandSet<T>) -> Result<Tensor<T>> {
    let (n, c, ho, wo) = s.check()?;
    let (h, w) = (ho * 2, wo * 2);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let k = T::from_f64_lossy(0.5);
    let (ll, lh, hl, hh) = (s.ll.data(), s.lh.data(), s.hl.data(), s.hh.data());
    let dst = out.data_mut();
    for plane in 0..n * c {
        let ib = plane * ho * wo;
        let ob = plane * h * w;
        for i in 0..ho {
            let r0 = ob + 2 * i * w;
            let r1 = r0 + w;
            for j in 0..wo {
                let o = ib + i * wo + j;
                let (p, q, r, t) = (ll[o], lh[o], hl[o], hh[o]);
                dst[r0 + 2 * j] = (p + q + r + t) * k;
                dst[r0 + 2 * j + 1] = (p + q - r - t) * k;
                dst[r1 + 2 * j] = (p - q + r - t) * k;
                dst[r1 + 2 * j + 1] = (p - q - r + t) * k;
            }
        }
    }
    Ok(out)
}

/// Cascaded decomposition: entry 0 transforms `x`, entry `l` transforms the
/// `ll` band of entry `l - 1`.
pub fn dwt2_multilevel<T: Scalar>(x: &Tensor<T>, level: usize) -> Result<Vec<SubbandSet<T>>> {
    let (_, _, h, w) = x.expect_rank4("dwt2_multilevel")?;
    if level == 0 {
        return shape_err("dwt2_multilevel: level must be at least 1");
    }
    let f = 1usize << level;
    if h % f != 0 || w % f != 0 {
        return shape_err(format!("dwt2_multilevel: {h}x{w} not divisible by 2^{level}"));
    }
    let mut out: Vec<SubbandSet<T>> = Vec::with_capacity(level);
    let mut cur = dwt2_haar(x)?;
    for _ in 1..level {
        let next = dwt2_haar(&cur.ll)?;
        out.push(cur);
        cur = next;
    }
    out.push(cur);
    Ok(out)
}

/// Rebuilds the input of [`dwt2_multilevel`]. The `ll` band of every entry
/// except the deepest is ignored and recomputed from the level below.
pub fn idwt2_multilevel<T: Scalar>(levels: &[SubbandSet<T>]) -> Result<Tensor<T>> {
    let Some(deepest) = levels.last() else {
        return shape_err("idwt2_multilevel: empty cascade");
    };
    let mut rec = idwt2_haar(deepest)?;
    for s in levels.iter().rev().skip(1) {
        let set = SubbandSet { ll: rec, lh: s.lh.clone(), hl: s.hl.clone(), hh: s.hh.clone() };
        rec = idwt2_haar(&set)?;
    }
    Ok(rec)
}
