//! Dense row-major tensors.
//!
//! Activations are rank 4 in `(batch, channels, height, width)` order; layer
//! weights use whatever rank their layer needs. Images are addressed as
//! `H×W×Ch` through [`Tensor::hwc`], which only describes the shape and does
//! not imply an interleaved memory layout.

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {shape:?} needs {n} elements, got {}", data.len()));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    /// Single image from an `H×W×Ch` interleaved buffer.
    pub fn from_hwc(h: usize, w: usize, c: usize, interleaved: &[T]) -> Result<Self> {
        if interleaved.len() != h * w * c {
            return shape_err(format!("{h}x{w}x{c} image needs {} values, got {}", h * w * c, interleaved.len()));
        }
        let mut out = Self::zeros(&[1, c, h, w]);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.data[(ch * h + y) * w + x] = interleaved[(y * w + x) * c + ch];
                }
            }
        }
        Ok(out)
    }

    /// Interleaved `H×W×Ch` copy of image `n` of the batch.
    pub fn to_hwc(&self, n: usize) -> Vec<T> {
        let (_, c, h, w) = self.dims4();
        let plane = self.image(n);
        let mut out = vec![T::zero(); h * w * c];
        for ch in 0..c {
            for p in 0..h * w {
                out[p * c + ch] = plane[ch * h * w + p];
            }
        }
        out
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(n, c, h, w)`; panics unless rank 4.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    /// `(H, W, Ch)` of a rank-4 activation.
    pub fn hwc(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.dims4();
        (h, w, c)
    }

    pub fn expect_rank4(&self, what: &str) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return shape_err(format!("{what}: expected rank 4, got {:?}", self.shape));
        }
        Ok(self.dims4())
    }

    pub fn expect_channels(&self, c: usize, what: &str) -> Result<()> {
        let (_, got, _, _) = self.expect_rank4(what)?;
        if got != c {
            return shape_err(format!("{what}: expected {c} channels, got {got}"));
        }
        Ok(())
    }

    /// Contiguous slice for image `n` of a rank-4 tensor.
    pub fn image(&self, n: usize) -> &[T] {
        let (_, c, h, w) = self.dims4();
        let sz = c * h * w;
        &self.data[n * sz..(n + 1) * sz]
    }

    pub fn image_mut(&mut self, n: usize) -> &mut [T] {
        let (_, c, h, w) = self.dims4();
        let sz = c * h * w;
        &mut self.data[n * sz..(n + 1) * sz]
    }

    pub fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Tensor { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect() }
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn cat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return shape_err("cat_channels: no inputs");
        };
        let (n, _, h, w) = first.expect_rank4("cat_channels")?;
        let mut total_c = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.expect_rank4("cat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return shape_err(format!("cat_channels: {:?} incompatible with {:?}", p.shape, first.shape));
            }
            total_c += pc;
        }
        let mut out = Vec::with_capacity(n * total_c * h * w);
        for b in 0..n {
            for p in parts {
                out.extend_from_slice(p.image(b));
            }
        }
        Ok(Tensor { shape: vec![n, total_c, h, w], data: out })
    }

    /// Inverse of [`Tensor::cat_channels`]: splits into the given channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Vec<Tensor<T>> {
        let (n, c, h, w) = self.dims4();
        assert_eq!(counts.iter().sum::<usize>(), c, "split_channels counts");
        let hw = h * w;
        let mut outs: Vec<Tensor<T>> =
            counts.iter().map(|&k| Tensor { shape: vec![n, k, h, w], data: Vec::with_capacity(n * k * hw) }).collect();
        for b in 0..n {
            let img = self.image(b);
            let mut off = 0;
            for (o, &k) in outs.iter_mut().zip(counts) {
                o.data.extend_from_slice(&img[off * hw..(off + k) * hw]);
                off += k;
            }
        }
        outs
    }

    /// Per-channel sum over batch and space; the bias gradient of a conv layer.
    pub fn channel_sums(&self) -> Vec<T> {
        let (n, c, h, w) = self.dims4();
        let hw = h * w;
        let mut out = vec![T::zero(); c];
        for b in 0..n {
            let img = self.image(b);
            for (ch, acc) in out.iter_mut().enumerate() {
                *acc += img[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
            }
        }
        out
    }
}
