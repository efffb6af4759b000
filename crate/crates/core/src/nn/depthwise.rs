use crate::error::Result;
use crate::nn::{HasParams, Init, ParamSpec};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel `k×k` convolution, stride 1, same padding (`k` odd).
/// Weight `[c, 1, k, k]`, bias `[c]`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub name: String,
    pub channels: usize,
    pub k: usize,
}

/// Output columns `ox` for which `ox + kj - pad` is inside `[0, w)`.
#[inline]
fn col_range(kj: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj);
    let hi = (w + pad).saturating_sub(kj).min(w);
    (lo, hi.max(lo))
}

impl DepthwiseConv2d {
    pub fn new(name: impl Into<String>, channels: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "depthwise kernel must be odd for same padding");
        DepthwiseConv2d { name: name.into(), channels, k }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward<T: Scalar>(&self, params: &ParameterStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_channels(self.channels, &self.name)?;
        let (n, c, h, w) = x.dims4();
        let weight = params.get(&self.weight_name())?.data();
        let bias = params.get(&self.bias_name())?.data();
        let (k, pad) = (self.k, self.k / 2);
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for b in 0..n {
            let src = x.image(b);
            let dst = out.image_mut(b);
            for ch in 0..c {
                let xs = &src[ch * h * w..(ch + 1) * h * w];
                let ys = &mut dst[ch * h * w..(ch + 1) * h * w];
                ys.fill(bias[ch]);
                let wk = &weight[ch * k * k..(ch + 1) * k * k];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = wk[ki * k + kj];
                        let (lo, hi) = col_range(kj, pad, w);
                        for oy in 0..h {
                            let iy = oy as isize + ki as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &xs[iy as usize * w..(iy as usize + 1) * w];
                            let out_row = &mut ys[oy * w..(oy + 1) * w];
                            for ox in lo..hi {
                                out_row[ox] += wv * row[ox + kj - pad];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut ParameterStore<T>,
    ) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4();
        let weight = params.get(&self.weight_name())?.data();
        let (k, pad) = (self.k, self.k / 2);
        let mut dw = vec![T::zero(); c * k * k];
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        for b in 0..n {
            let src = x.image(b);
            let g = dy.image(b);
            let dxi = dx.image_mut(b);
            for ch in 0..c {
                let xs = &src[ch * h * w..(ch + 1) * h * w];
                let gs = &g[ch * h * w..(ch + 1) * h * w];
                let dxs = &mut dxi[ch * h * w..(ch + 1) * h * w];
                for ki in 0..k {
                    for kj in 0..k {
                        let widx = ch * k * k + ki * k + kj;
                        let wv = weight[widx];
                        let (lo, hi) = col_range(kj, pad, w);
                        let mut acc = T::zero();
                        for oy in 0..h {
                            let iy = oy as isize + ki as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let grow = &gs[oy * w..(oy + 1) * w];
                            let xrow = &xs[iy * w..(iy + 1) * w];
                            for ox in lo..hi {
                                acc += grow[ox] * xrow[ox + kj - pad];
                            }
                            let dxrow = &mut dxs[iy * w..(iy + 1) * w];
                            for ox in lo..hi {
                                dxrow[ox + kj - pad] += wv * grow[ox];
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
        grads.accumulate(&self.weight_name(), &dw, &[c, 1, k, k]);
        grads.accumulate(&self.bias_name(), &dy.channel_sums(), &[c]);
        Ok(dx)
    }
}

impl HasParams for DepthwiseConv2d {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let bound = 1.0 / ((self.k * self.k) as f64).sqrt();
        vec![
            ParamSpec::new(self.weight_name(), vec![self.channels, 1, self.k, self.k], Init::Uniform(bound)),
            ParamSpec::new(self.bias_name(), vec![self.channels], Init::Uniform(bound)),
        ]
    }
}
