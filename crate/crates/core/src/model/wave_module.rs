use crate::error::{shape_err, Result};
use crate::model::blocks::{Decoder, DecoderCache, DepthConv, DepthConvCache, WaveMixBlock, WaveMixCache};
use crate::model::config::ModelConfig;
use crate::nn::{Conv2d, HasParams, Mode, ParamSpec, RunningStats};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One Wave module:
///
/// ```text
/// x0 = x_in ⊕ m                 H×W×4
/// x1 = c1(x0)                   H/2×W/2×C     (3×3, stride 2)
/// x2 = WaveMix blocks(x1)       H/2×W/2×C
/// x3 = DepthConv(x2)            H/2×W/2×C
/// x4 = x3 ⊕ x1                  H/2×W/2×2C
/// x5 = Decoder(x4)              H×W×C/2
/// x6 = x5 ⊕ x_in                H×W×(C/2+3)
/// x7 = c2(x6)                   H×W×3         (3×3, stride 1)
/// out = x7 + x_in
/// ```
#[derive(Clone, Debug)]
pub struct WaveModule {
    pub embed_dim: usize,
    c1: Conv2d,
    blocks: Vec<WaveMixBlock>,
    depthconv: Option<DepthConv>,
    decoder: Decoder,
    c2: Conv2d,
}

/// Intermediate tensors of one module forward pass, kept for backward and
/// for shape inspection.
#[derive(Clone, Debug)]
pub struct ModuleCache<T> {
    x0: Tensor<T>,
    x1: Tensor<T>,
    blocks: Vec<WaveMixCache<T>>,
    x2: Tensor<T>,
    depthconv: Option<DepthConvCache<T>>,
    x3_shape: (usize, usize, usize),
    x4_shape: (usize, usize, usize),
    decoder: DecoderCache<T>,
    x5_shape: (usize, usize, usize),
    x6: Tensor<T>,
    x7_shape: (usize, usize, usize),
}

/// `(H, W, C)` of every numbered intermediate, `x0` through `x7`.
pub type ShapeTrace = [(usize, usize, usize); 8];

impl<T: Scalar> ModuleCache<T> {
    pub fn shape_trace(&self) -> ShapeTrace {
        [
            self.x0.hwc(),
            self.x1.hwc(),
            self.x2.hwc(),
            self.x3_shape,
            self.x4_shape,
            self.x5_shape,
            self.x6.hwc(),
            self.x7_shape,
        ]
    }
}

impl WaveModule {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        WaveModule {
            embed_dim: c,
            c1: Conv2d::new(format!("{prefix}.c1"), 4, c, 3, 2, 1),
            blocks: (0..cfg.blocks_per_module)
                .map(|j| WaveMixBlock::new(&format!("{prefix}.blocks.{j}"), c, cfg.dwt_level, cfg.mlp_mult))
                .collect(),
            depthconv: cfg.use_depthconv.then(|| DepthConv::new(&format!("{prefix}.depthconv"), c)),
            decoder: Decoder::new(&format!("{prefix}.decoder"), c),
            c2: Conv2d::new(format!("{prefix}.c2"), c / 2 + 3, 3, 3, 1, 1),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        x_in: &Tensor<T>,
        mask: &Tensor<T>,
        mode: Mode,
        stats: &mut Vec<RunningStats<T>>,
    ) -> Result<(Tensor<T>, ModuleCache<T>)> {
        let (n, c, h, w) = x_in.expect_rank4("wave module input")?;
        if c != 3 {
            return shape_err(format!("wave module input must have 3 channels, got {c}"));
        }
        if mask.shape() != [n, 1, h, w] {
            return shape_err(format!("mask shape {:?} does not match input {:?}", mask.shape(), x_in.shape()));
        }
        let x0 = Tensor::cat_channels(&[x_in, mask])?;
        let x1 = self.c1.forward(params, &x0)?;
        let mut cur = x1.clone();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, bc) = b.forward(params, &cur, mode, stats)?;
            block_caches.push(bc);
            cur = next;
        }
        let x2 = cur;
        let (x3, dc_cache) = match &self.depthconv {
            Some(dc) => {
                let (y, cache) = dc.forward(params, &x2, mode, stats)?;
                (y, Some(cache))
            }
            None => (x2.clone(), None),
        };
        let x4 = Tensor::cat_channels(&[&x3, &x1])?;
        let (x5, dec_cache) = self.decoder.forward(params, &x4, mode, stats)?;
        let x6 = Tensor::cat_channels(&[&x5, x_in])?;
        let x7 = self.c2.forward(params, &x6)?;
        let x7_shape = x7.hwc();
        let mut out = x7;
        out.add_assign(x_in);
        Ok((
            out,
            ModuleCache {
                x0,
                x1,
                blocks: block_caches,
                x2,
                depthconv: dc_cache,
                x3_shape: x3.hwc(),
                x4_shape: x4.hwc(),
                decoder: dec_cache,
                x5_shape: x5.hwc(),
                x6,
                x7_shape,
            },
        ))
    }

    /// Returns the gradient with respect to `x_in` (the mask is constant).
    pub fn backward<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        cache: &ModuleCache<T>,
        dout: &Tensor<T>,
        grads: &mut ParameterStore<T>,
    ) -> Result<Tensor<T>> {
        let c = self.embed_dim;
        let mut dx_in = dout.clone();
        let dx6 = self.c2.backward(params, &cache.x6, dout, grads)?;
        let mut p6 = dx6.split_channels(&[c / 2, 3]).into_iter();
        let dx5 = p6.next().unwrap();
        dx_in.add_assign(&p6.next().unwrap());
        let dx4 = self.decoder.backward(params, &cache.decoder, &dx5, grads)?;
        let mut p4 = dx4.split_channels(&[c, c]).into_iter();
        let dx3 = p4.next().unwrap();
        let mut dx1 = p4.next().unwrap();
        let mut dcur = match (&self.depthconv, &cache.depthconv) {
            (Some(dc), Some(dcc)) => dc.backward(params, dcc, &dx3, grads)?,
            _ => dx3,
        };
        for (b, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            dcur = b.backward(params, bc, &dcur, grads)?;
        }
        dx1.add_assign(&dcur);
        let dx0 = self.c1.backward(params, &cache.x0, &dx1, grads)?;
        let mut p0 = dx0.split_channels(&[3, 1]).into_iter();
        dx_in.add_assign(&p0.next().unwrap());
        Ok(dx_in)
    }
}

impl HasParams for WaveModule {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.c1.param_specs();
        for b in &self.blocks {
            v.extend(b.param_specs());
        }
        if let Some(dc) = &self.depthconv {
            v.extend(dc.param_specs());
        }
        v.extend(self.decoder.param_specs());
        v.extend(self.c2.param_specs());
        v
    }
}
