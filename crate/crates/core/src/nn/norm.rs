use crate::error::Result;
use crate::nn::{HasParams, Init, Mode, ParamSpec};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization with affine transform.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
}

/// Batch statistics observed in a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    /// Unbiased variance, as used for the running estimate.
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d { name: name.into(), channels }
    }

    fn key(&self, field: &str) -> String {
        format!("{}.{field}", self.name)
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, BnCache<T>, Option<RunningStats<T>>)> {
        x.expect_channels(self.channels, &self.name)?;
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let count = n * hw;
        let gamma = params.get(&self.key("weight"))?.data();
        let beta = params.get(&self.key("bias"))?.data();
        let eps = T::from_f64_lossy(BN_EPS);

        let (mean, var, stats) = match mode {
            Mode::Eval => (
                params.get(&self.key("running_mean"))?.data().to_vec(),
                params.get(&self.key("running_var"))?.data().to_vec(),
                None,
            ),
            Mode::Train => {
                let cnt = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                for b in 0..n {
                    let img = x.image(b);
                    for (ch, m) in mean.iter_mut().enumerate() {
                        *m += img[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= cnt);
                let mut var = vec![T::zero(); c];
                for b in 0..n {
                    let img = x.image(b);
                    for ch in 0..c {
                        let mu = mean[ch];
                        var[ch] += img[ch * hw..(ch + 1) * hw].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                    }
                }
                let unbiased: Vec<T> = if count > 1 {
                    let d = T::from_usize(count - 1).unwrap();
                    var.iter().map(|&v| v / d).collect()
                } else {
                    var.clone()
                };
                var.iter_mut().for_each(|v| *v /= cnt);
                let stats = RunningStats { name: self.name.clone(), mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for b in 0..n {
            let src = x.image(b);
            let xh = xhat.image_mut(b);
            for ch in 0..c {
                let (mu, is) = (mean[ch], inv_std[ch]);
                for i in ch * hw..(ch + 1) * hw {
                    xh[i] = (src[i] - mu) * is;
                }
            }
            let yi = y.image_mut(b);
            let xh = xhat.image(b);
            for ch in 0..c {
                let (g, bt) = (gamma[ch], beta[ch]);
                for i in ch * hw..(ch + 1) * hw {
                    yi[i] = g * xh[i] + bt;
                }
            }
        }
        Ok((y, BnCache { xhat, inv_std, mode }, stats))
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
        grads: &mut ParameterStore<T>,
    ) -> Result<Tensor<T>> {
        let (n, c, h, w) = dy.dims4();
        let hw = h * w;
        let gamma = params.get(&self.key("weight"))?.data();
        let mut dgamma = vec![T::zero(); c];
        let dbeta = dy.channel_sums();
        for b in 0..n {
            let g = dy.image(b);
            let xh = cache.xhat.image(b);
            for ch in 0..c {
                dgamma[ch] += (ch * hw..(ch + 1) * hw).map(|i| g[i] * xh[i]).sum::<T>();
            }
        }
        let mut dx = Tensor::zeros(dy.shape());
        match cache.mode {
            Mode::Eval => {
                for b in 0..n {
                    let g = dy.image(b);
                    let d = dx.image_mut(b);
                    for ch in 0..c {
                        let s = gamma[ch] * cache.inv_std[ch];
                        for i in ch * hw..(ch + 1) * hw {
                            d[i] = g[i] * s;
                        }
                    }
                }
            }
            Mode::Train => {
                let cnt = T::from_usize(n * hw).unwrap();
                for b in 0..n {
                    let g = dy.image(b);
                    let xh = cache.xhat.image(b);
                    let d = dx.image_mut(b);
                    for ch in 0..c {
                        let s = gamma[ch] * cache.inv_std[ch] / cnt;
                        let (sb, sg) = (dbeta[ch], dgamma[ch]);
                        for i in ch * hw..(ch + 1) * hw {
                            d[i] = s * (cnt * g[i] - sb - xh[i] * sg);
                        }
                    }
                }
            }
        }
        grads.accumulate(&self.key("weight"), &dgamma, &[c]);
        grads.accumulate(&self.key("bias"), &dbeta, &[c]);
        Ok(dx)
    }

    /// Folds observed batch statistics into the running estimates.
    pub fn update_running<T: Scalar>(params: &mut ParameterStore<T>, stats: &RunningStats<T>) -> Result<()> {
        let mom = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - mom;
        let rm = params.get_mut(&format!("{}.running_mean", stats.name))?;
        for (r, &m) in rm.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + mom * m;
        }
        let rv = params.get_mut(&format!("{}.running_var", stats.name))?;
        for (r, &v) in rv.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + mom * v;
        }
        Ok(())
    }
}

impl HasParams for BatchNorm2d {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.channels;
        vec![
            ParamSpec::new(self.key("weight"), vec![c], Init::Const(1.0)),
            ParamSpec::new(self.key("bias"), vec![c], Init::Const(0.0)),
            ParamSpec::new(self.key("running_mean"), vec![c], Init::Const(0.0)),
            ParamSpec::new(self.key("running_var"), vec![c], Init::Const(1.0)),
        ]
    }
}
