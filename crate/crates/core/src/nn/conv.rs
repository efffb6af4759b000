use crate::error::{shape_err, Result};
use crate::nn::{HasParams, Init, ParamSpec};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of a square-kernel sliding window.
#[derive(Clone, Copy, Debug)]
struct Window {
    k: usize,
    stride: usize,
    pad: usize,
}

impl Window {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source index for output position `o` and tap `t`, if in bounds.
    #[inline]
    fn src(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }
}

/// Unfolds a `c×h×w` plane into `(c·k·k) × (ho·wo)` columns.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, win: Window, ho: usize, wo: usize, cols: &mut [T]) {
    let k = win.k;
    let p = ho * wo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ch * k + ki) * k + kj) * p..][..p];
                for oy in 0..ho {
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    match win.src(oy, ki, h) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * w..(iy + 1) * w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match win.src(ox, kj, w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto a zeroed `c×h×w` plane.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, win: Window, ho: usize, wo: usize, x: &mut [T]) {
    let k = win.k;
    let p = ho * wo;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ch * k + ki) * k + kj) * p..][..p];
                for oy in 0..ho {
                    let Some(iy) = win.src(oy, ki, h) else { continue };
                    let src = &row[oy * wo..(oy + 1) * wo];
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    for (ox, &v) in src.iter().enumerate() {
                        if let Some(ix) = win.src(ox, kj, w) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T], plane: usize) {
    for (ch, &b) in bias.iter().enumerate() {
        for v in &mut y[ch * plane..(ch + 1) * plane] {
            *v += b;
        }
    }
}

/// Dense 2D convolution with square kernel, weight `[cout, cin, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d { name: name.into(), cin, cout, k, stride, pad }
    }

    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 1, 1, 0)
    }

    fn win(&self) -> Window {
        Window { k: self.k, stride: self.stride, pad: self.pad }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.k, self.stride, self.pad);
        if h + 2 * p < k || w + 2 * p < k {
            return shape_err(format!("{}: input {h}x{w} smaller than kernel {k}", self.name));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    pub fn forward<T: Scalar>(&self, params: &ParameterStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_channels(self.cin, &self.name)?;
        let (n, _, h, w) = x.dims4();
        let (ho, wo) = self.out_size(h, w)?;
        let weight = params.get(&self.weight_name())?.data();
        let bias = params.get(&self.bias_name())?.data();
        let kk = self.cin * self.k * self.k;
        let p = ho * wo;
        let mut out = Tensor::zeros(&[n, self.cout, ho, wo]);
        let mut cols = if self.win().is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
        for b in 0..n {
            let src = if self.win().is_pointwise() {
                x.image(b)
            } else {
                im2col(x.image(b), self.cin, h, w, self.win(), ho, wo, &mut cols);
                &cols
            };
            let y = out.image_mut(b);
            T::gemm(
                self.cout,
                kk,
                p,
                T::one(),
                weight,
                kk as isize,
                1,
                src,
                p as isize,
                1,
                T::zero(),
                y,
                p as isize,
                1,
            );
            add_bias(y, bias, p);
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
        let (n, _, h, w) = x.dims4();
        let (_, _, ho, wo) = dy.dims4();
        let weight = params.get(&self.weight_name())?.data();
        let kk = self.cin * self.k * self.k;
        let p = ho * wo;
        let mut dw = vec![T::zero(); self.cout * kk];
        let mut dx = Tensor::zeros(&[n, self.cin, h, w]);
        let pointwise = self.win().is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
        let mut dcols = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
        for b in 0..n {
            let g = dy.image(b);
            let src = if pointwise {
                x.image(b)
            } else {
                im2col(x.image(b), self.cin, h, w, self.win(), ho, wo, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            T::gemm(
                self.cout,
                p,
                kk,
                T::one(),
                g,
                p as isize,
                1,
                src,
                1,
                p as isize,
                T::one(),
                &mut dw,
                kk as isize,
                1,
            );
            // dcols = Wᵀ · dY
            if pointwise {
                let dxi = dx.image_mut(b);
                T::gemm(
                    kk,
                    self.cout,
                    p,
                    T::one(),
                    weight,
                    1,
                    kk as isize,
                    g,
                    p as isize,
                    1,
                    T::zero(),
                    dxi,
                    p as isize,
                    1,
                );
            } else {
                T::gemm(
                    kk,
                    self.cout,
                    p,
                    T::one(),
                    weight,
                    1,
                    kk as isize,
                    g,
                    p as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    p as isize,
                    1,
                );
                col2im(&dcols, self.cin, h, w, self.win(), ho, wo, dx.image_mut(b));
            }
        }
        grads.accumulate(&self.weight_name(), &dw, &[self.cout, self.cin, self.k, self.k]);
        grads.accumulate(&self.bias_name(), &dy.channel_sums(), &[self.cout]);
        Ok(dx)
    }
}

impl HasParams for Conv2d {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let bound = 1.0 / ((self.cin * self.k * self.k) as f64).sqrt();
        vec![
            ParamSpec::new(self.weight_name(), vec![self.cout, self.cin, self.k, self.k], Init::Uniform(bound)),
            ParamSpec::new(self.bias_name(), vec![self.cout], Init::Uniform(bound)),
        ]
    }
}

/// Transposed 2D convolution, weight `[cin, cout, k, k]`.
///
/// Output size is `(h - 1)·stride - 2·pad + k`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvTranspose2d { name: name.into(), cin, cout, k, stride, pad }
    }

    fn win(&self) -> Window {
        Window { k: self.k, stride: self.stride, pad: self.pad }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = |v: usize| ((v - 1) * self.stride + self.k).checked_sub(2 * self.pad);
        match (h.checked_sub(1).and_then(|_| f(h)), w.checked_sub(1).and_then(|_| f(w))) {
            (Some(a), Some(b)) if a > 0 && b > 0 => Ok((a, b)),
            _ => shape_err(format!("{}: degenerate input {h}x{w}", self.name)),
        }
    }

    pub fn forward<T: Scalar>(&self, params: &ParameterStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_channels(self.cin, &self.name)?;
        let (n, _, h, w) = x.dims4();
        let (ho, wo) = self.out_size(h, w)?;
        let weight = params.get(&self.weight_name())?.data();
        let bias = params.get(&self.bias_name())?.data();
        let kk = self.cout * self.k * self.k;
        let p = h * w;
        let mut out = Tensor::zeros(&[n, self.cout, ho, wo]);
        let mut cols = vec![T::zero(); kk * p];
        for b in 0..n {
            // cols = Wᵀ · X
            T::gemm(
                kk,
                self.cin,
                p,
                T::one(),
                weight,
                1,
                kk as isize,
                x.image(b),
                p as isize,
                1,
                T::zero(),
                &mut cols,
                p as isize,
                1,
            );
            let y = out.image_mut(b);
            col2im(&cols, self.cout, ho, wo, self.win(), h, w, y);
            add_bias(y, bias, ho * wo);
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
        let (n, _, h, w) = x.dims4();
        let (_, _, ho, wo) = dy.dims4();
        let weight = params.get(&self.weight_name())?.data();
        let kk = self.cout * self.k * self.k;
        let p = h * w;
        let mut dw = vec![T::zero(); self.cin * kk];
        let mut dx = Tensor::zeros(&[n, self.cin, h, w]);
        let mut dcols = vec![T::zero(); kk * p];
        for b in 0..n {
            im2col(dy.image(b), self.cout, ho, wo, self.win(), h, w, &mut dcols);
            // dX = W · dcols
            T::gemm(
                self.cin,
                kk,
                p,
                T::one(),
                weight,
                kk as isize,
                1,
                &dcols,
                p as isize,
                1,
                T::zero(),
                dx.image_mut(b),
                p as isize,
                1,
            );
            // dW += X · dcolsᵀ
            T::gemm(
                self.cin,
                p,
                kk,
                T::one(),
                x.image(b),
                p as isize,
                1,
                &dcols,
                1,
                p as isize,
                T::one(),
                &mut dw,
                kk as isize,
                1,
            );
        }
        grads.accumulate(&self.weight_name(), &dw, &[self.cin, self.cout, self.k, self.k]);
        grads.accumulate(&self.bias_name(), &dy.channel_sums(), &[self.cout]);
        Ok(dx)
    }
}

impl HasParams for ConvTranspose2d {
    fn param_specs(&self) -> Vec<ParamSpec> {
        // fan-in as computed for transposed convolutions by common frameworks
        let bound = 1.0 / ((self.cout * self.k * self.k) as f64).sqrt();
        vec![
            ParamSpec::new(self.weight_name(), vec![self.cin, self.cout, self.k, self.k], Init::Uniform(bound)),
            ParamSpec::new(self.bias_name(), vec![self.cout], Init::Uniform(bound)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Direct convolution loop used as an independent reference.
    fn naive_conv(c: &Conv2d, p: &ParameterStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (n, _, h, w) = x.dims4();
        let (ho, wo) = c.out_size(h, w).unwrap();
        let wt = p.get(&c.weight_name()).unwrap().data();
        let bs = p.get(&c.bias_name()).unwrap().data();
        let mut y = Tensor::zeros(&[n, c.cout, ho, wo]);
        for b in 0..n {
            for o in 0..c.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bs[o];
                        for i in 0..c.cin {
                            for ki in 0..c.k {
                                for kj in 0..c.k {
                                    let iy = (oy * c.stride + ki) as isize - c.pad as isize;
                                    let ix = (ox * c.stride + kj) as isize - c.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wt[((o * c.cin + i) * c.k + ki) * c.k + kj]
                                        * x.data()[((b * c.cin + i) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        y.data_mut()[((b * c.cout + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    /// Scatter form of the transposed convolution.
    fn naive_conv_t(c: &ConvTranspose2d, p: &ParameterStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (n, _, h, w) = x.dims4();
        let (ho, wo) = c.out_size(h, w).unwrap();
        let wt = p.get(&c.weight_name()).unwrap().data();
        let bs = p.get(&c.bias_name()).unwrap().data();
        let mut y = Tensor::zeros(&[n, c.cout, ho, wo]);
        for b in 0..n {
            for o in 0..c.cout {
                for v in &mut y.data_mut()[(b * c.cout + o) * ho * wo..][..ho * wo] {
                    *v = bs[o];
                }
            }
            for i in 0..c.cin {
                for iy in 0..h {
                    for ix in 0..w {
                        let xv = x.data()[((b * c.cin + i) * h + iy) * w + ix];
                        for o in 0..c.cout {
                            for ki in 0..c.k {
                                for kj in 0..c.k {
                                    let oy = (iy * c.stride + ki) as isize - c.pad as isize;
                                    let ox = (ix * c.stride + kj) as isize - c.pad as isize;
                                    if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                                        continue;
                                    }
                                    y.data_mut()[((b * c.cout + o) * ho + oy as usize) * wo + ox as usize] +=
                                        xv * wt[((i * c.cout + o) * c.k + ki) * c.k + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn params_for(specs: Vec<ParamSpec>) -> ParameterStore<f64> {
        init_params(&specs, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn conv_matches_direct_loop() {
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2)] {
            let c = Conv2d::new("c", 3, 4, k, s, p);
            let params = params_for(c.param_specs());
            let x = rand_tensor(&[2, 3, 6, 8], 11);
            let y = c.forward(&params, &x).unwrap();
            assert!(y.max_abs_diff(&naive_conv(&c, &params, &x)) < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_matches_scatter_loop() {
        for (k, s, p) in [(4, 2, 1), (2, 2, 0), (4, 4, 0)] {
            let c = ConvTranspose2d::new("t", 3, 2, k, s, p);
            let params = params_for(c.param_specs());
            let x = rand_tensor(&[2, 3, 3, 5], 5);
            let y = c.forward(&params, &x).unwrap();
            assert_eq!(y.hwc(), (3 * s, 5 * s, 2));
            assert!(y.max_abs_diff(&naive_conv_t(&c, &params, &x)) < 1e-12);
        }
    }

    #[test]
    fn stride_two_kernel_four_doubles_exactly() {
        let c = ConvTranspose2d::new("t", 1, 1, 4, 2, 1);
        for h in [4, 64, 128] {
            assert_eq!(c.out_size(h, h).unwrap(), (2 * h, 2 * h));
        }
    }

    /// <dy, f(x)> is linear in x and in the weights, so the analytic
    /// gradients must satisfy the adjoint identity exactly.
    fn check_adjoint(
        fwd: &dyn Fn(&ParameterStore<f64>, &Tensor<f64>) -> Tensor<f64>,
        bwd: &dyn Fn(&ParameterStore<f64>, &Tensor<f64>, &Tensor<f64>, &mut ParameterStore<f64>) -> Tensor<f64>,
        params: &ParameterStore<f64>,
        x: &Tensor<f64>,
    ) {
        let y = fwd(params, x);
        let dy = rand_tensor(y.shape(), 99);
        let mut g = ParameterStore::new();
        let dx = bwd(params, x, &dy, &mut g);
        let h = 1e-6;
        // input gradient via finite differences of the scalar <dy, y>
        let dir = rand_tensor(x.shape(), 7);
        let xp = x.zip_map(&dir, |a, d| a + h * d);
        let xm = x.zip_map(&dir, |a, d| a - h * d);
        let dot = |t: &Tensor<f64>| t.zip_map(&dy, |a, b| a * b).sum();
        let fd = (dot(&fwd(params, &xp)) - dot(&fwd(params, &xm))) / (2.0 * h);
        let an = dx.zip_map(&dir, |a, b| a * b).sum();
        assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0), "dx: {fd} vs {an}");
        for (name, gt) in g.iter() {
            let dirp = rand_tensor(gt.shape(), 13);
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp.get_mut(name).unwrap().data_mut().iter_mut().zip(dirp.data()).for_each(|(v, d)| *v += h * d);
            pm.get_mut(name).unwrap().data_mut().iter_mut().zip(dirp.data()).for_each(|(v, d)| *v -= h * d);
            let fd = (dot(&fwd(&pp, x)) - dot(&fwd(&pm, x))) / (2.0 * h);
            let an = gt.zip_map(&dirp, |a, b| a * b).sum();
            assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0), "{name}: {fd} vs {an}");
        }
    }

    #[test]
    fn conv_gradients() {
        for (k, s, p) in [(3, 2, 1), (1, 1, 0), (3, 1, 1)] {
            let c = Conv2d::new("c", 2, 3, k, s, p);
            let params = params_for(c.param_specs());
            let x = rand_tensor(&[2, 2, 6, 4], 1);
            check_adjoint(
                &|p, x| c.forward(p, x).unwrap(),
                &|p, x, dy, g| c.backward(p, x, dy, g).unwrap(),
                &params,
                &x,
            );
        }
    }

    #[test]
    fn conv_transpose_gradients() {
        for (k, s, p) in [(4, 2, 1), (2, 2, 0)] {
            let c = ConvTranspose2d::new("t", 3, 2, k, s, p);
            let params = params_for(c.param_specs());
            let x = rand_tensor(&[2, 3, 3, 4], 2);
            check_adjoint(
                &|p, x| c.forward(p, x).unwrap(),
                &|p, x, dy, g| c.backward(p, x, dy, g).unwrap(),
                &params,
                &x,
            );
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let c = Conv2d::pointwise("c", 4, 2);
        let params: ParameterStore<f32> = init_params(&c.param_specs(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(c.forward(&params, &Tensor::zeros(&[1, 3, 2, 2])).is_err());
    }
}
