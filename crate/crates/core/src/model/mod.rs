//! The inpainting network.

mod blocks;
mod composite;
mod config;
mod count;
mod wave_module;

pub use blocks::{Decoder, DepthConv, WaveMixBlock, WaveMixCache, DEPTHCONV_KERNEL};
pub use composite::{blend, blend_backward, composite, validate_mask};
pub use config::ModelConfig;
pub use count::count_parameters;
pub use wave_module::{ModuleCache, ShapeTrace, WaveModule};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::nn::{init_params, BatchNorm2d, HasParams, Mode, ParamSpec, RunningStats};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A chain of Wave modules. Holds only the architecture; weights live in a
/// [`ParameterStore`] so one network description can serve many stores.
#[derive(Clone, Debug)]
pub struct WavePaint {
    cfg: ModelConfig,
    modules: Vec<WaveModule>,
}

/// Everything a training-mode forward pass keeps for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    caches: Vec<ModuleCache<T>>,
    /// Batch statistics seen by every batch-norm layer, in forward order.
    pub running: Vec<RunningStats<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn module_caches(&self) -> &[ModuleCache<T>] {
        &self.caches
    }
}

impl WavePaint {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let modules = (0..cfg.modules).map(|i| WaveModule::new(&format!("modules.{i}"), &cfg)).collect();
        Ok(WavePaint { cfg, modules })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn modules(&self) -> &[WaveModule] {
        &self.modules
    }

    /// Kaiming-style uniform weights, unit/zero batch-norm affine.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParameterStore<T> {
        init_params(&self.param_specs(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Checks that `params` holds exactly the tensors this network expects.
    pub fn check_params<T: Scalar>(&self, params: &ParameterStore<T>) -> Result<()> {
        let specs = self.param_specs();
        for s in &specs {
            let t = params.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return shape_err(format!("{}: expected {:?}, found {:?}", s.name, s.shape, t.shape()));
            }
        }
        if params.len() != specs.len() {
            return shape_err(format!("expected {} tensors, found {}", specs.len(), params.len()));
        }
        Ok(())
    }

    pub fn validate_input<T: Scalar>(&self, x: &Tensor<T>, mask: &Tensor<T>) -> Result<()> {
        let (n, c, h, w) = x.expect_rank4("image")?;
        if c != 3 {
            return shape_err(format!("image must have 3 channels, got {c}"));
        }
        if mask.shape() != [n, 1, h, w] {
            return shape_err(format!("mask shape {:?} does not match image {:?}", mask.shape(), x.shape()));
        }
        let d = self.cfg.size_divisor();
        if h % d != 0 || w % d != 0 {
            return shape_err(format!("image {h}x{w} must be divisible by {d}"));
        }
        validate_mask(mask)?;
        x.ensure_finite("image")
    }

    /// Raw network output ŷ (unclamped) for image `x` and mask `m`
    /// (1 = known, 0 = hole). Hole pixels are zeroed before entry.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        x: &Tensor<T>,
        mask: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        Ok(self.forward_tape(params, x, mask, mode)?.0)
    }

    pub fn forward_tape<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        x: &Tensor<T>,
        mask: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        self.validate_input(x, mask)?;
        let mut cur = mask_image(x, mask);
        let mut tape = Tape { caches: Vec::with_capacity(self.modules.len()), running: Vec::new() };
        for m in &self.modules {
            let (next, cache) = m.forward(params, &cur, mask, mode, &mut tape.running)?;
            tape.caches.push(cache);
            cur = next;
        }
        Ok((cur, tape))
    }

    /// Parameter gradients of `<dy, ŷ>`.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        tape: &Tape<T>,
        dy: &Tensor<T>,
    ) -> Result<ParameterStore<T>> {
        let mut grads = ParameterStore::new();
        let mut d = dy.clone();
        for (m, cache) in self.modules.iter().zip(&tape.caches).rev() {
            d = m.backward(params, cache, &d, &mut grads)?;
        }
        Ok(grads)
    }

    /// Folds the batch statistics recorded on `tape` into the running
    /// estimates of `params`.
    pub fn apply_running_stats<T: Scalar>(params: &mut ParameterStore<T>, tape: &Tape<T>) -> Result<()> {
        for s in &tape.running {
            BatchNorm2d::update_running(params, s)?;
        }
        Ok(())
    }
}

impl HasParams for WavePaint {
    fn param_specs(&self) -> Vec<ParamSpec> {
        self.modules.iter().flat_map(|m| m.param_specs()).collect()
    }
}

/// `x ⊙ m`, broadcasting the single mask channel.
pub fn mask_image<T: Scalar>(x: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = x.clone();
    for b in 0..n {
        let m = mask.image(b);
        let img = out.image_mut(b);
        for ch in 0..c {
            for (v, &mv) in img[ch * hw..(ch + 1) * hw].iter_mut().zip(m) {
                if mv == T::zero() {
                    *v = T::zero();
                }
            }
        }
    }
    out
}
