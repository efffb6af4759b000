//! Layer primitives with explicit backward passes.
//!
//! Layers are stateless descriptions (name prefix + hyperparameters); their
//! weights live in a [`ParameterStore`]. Each `backward` takes the same
//! inputs as `forward` plus the output gradient, accumulates parameter
//! gradients into a gradient store under the same names, and returns the
//! input gradient.

mod activation;
mod conv;
mod depthwise;
mod norm;

pub use activation::{gelu, gelu_backward};
pub use conv::{Conv2d, ConvTranspose2d};
pub use depthwise::DepthwiseConv2d;
pub use norm::{BatchNorm2d, BnCache, RunningStats};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm; running statistics are reported.
    Train,
    /// Running statistics in batch-norm.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Uniform(f64),
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec { name, shape, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> Tensor<T> {
        match self.init {
            Init::Const(v) => Tensor::full(&self.shape, T::from_f64_lossy(v)),
            Init::Uniform(b) => Tensor::from_fn(&self.shape, |_| T::from_f64_lossy(rng.random_range(-b..b))),
        }
    }
}

/// Anything owning named parameters.
pub trait HasParams {
    fn param_specs(&self) -> Vec<ParamSpec>;
}

/// Builds a store from specs; initialization visits names in sorted order so
/// the result only depends on the seed and the set of specs.
pub fn init_params<T: Scalar>(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> ParameterStore<T> {
    let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut store = ParameterStore::new();
    for s in sorted {
        let prev = store.insert(s.name.clone(), s.materialize(rng));
        assert!(prev.is_none(), "duplicate parameter name {}", s.name);
    }
    store
}
