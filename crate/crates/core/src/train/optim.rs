use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{is_buffer, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::config::{AdamWConfig, SgdConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

/// Scalar part of the optimizer state, stored in the checkpoint header.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerMeta {
    AdamW { config: AdamWConfig, step: u64 },
    Sgd { config: SgdConfig, step: u64 },
}

/// Decoupled weight decay Adam. Buffers (running statistics) are skipped.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    m: ParameterStore<T>,
    v: ParameterStore<T>,
}

/// SGD with heavy-ball momentum; the velocity starts at zero.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    pub step: u64,
    velocity: ParameterStore<T>,
}

#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    AdamW(AdamW<T>),
    Sgd(Sgd<T>),
}

const ADAMW_M: &str = "optim.adamw.m.";
const ADAMW_V: &str = "optim.adamw.v.";
const SGD_VEL: &str = "optim.sgd.velocity.";

/// True for checkpoint entries that hold optimizer state.
pub fn is_optimizer_tensor(name: &str) -> bool {
    name.starts_with("optim.")
}

impl<T: Scalar> Optimizer<T> {
    pub fn adamw(config: AdamWConfig, params: &ParameterStore<T>) -> Self {
        Optimizer::AdamW(AdamW { config, step: 0, m: params.zeros_like_trainable(), v: params.zeros_like_trainable() })
    }

    pub fn sgd(config: SgdConfig, params: &ParameterStore<T>) -> Self {
        Optimizer::Sgd(Sgd { config, step: 0, velocity: params.zeros_like_trainable() })
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::AdamW(_) => OptimizerKind::AdamW,
            Optimizer::Sgd(_) => OptimizerKind::Sgd,
        }
    }

    pub fn steps(&self) -> u64 {
        match self {
            Optimizer::AdamW(a) => a.step,
            Optimizer::Sgd(s) => s.step,
        }
    }

    /// Applies one update from `grads` to every trainable tensor.
    pub fn step(&mut self, params: &mut ParameterStore<T>, grads: &ParameterStore<T>) -> Result<()> {
        match self {
            Optimizer::AdamW(a) => a.update(params, grads),
            Optimizer::Sgd(s) => s.update(params, grads),
        }
    }

    pub fn meta(&self) -> OptimizerMeta {
        match self {
            Optimizer::AdamW(a) => OptimizerMeta::AdamW { config: a.config, step: a.step },
            Optimizer::Sgd(s) => OptimizerMeta::Sgd { config: s.config, step: s.step },
        }
    }

    /// State tensors under their checkpoint names.
    pub fn state_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            Optimizer::AdamW(a) => {
                a.m.iter()
                    .map(|(n, t)| (format!("{ADAMW_M}{n}"), t))
                    .chain(a.v.iter().map(|(n, t)| (format!("{ADAMW_V}{n}"), t)))
                    .collect()
            }
            Optimizer::Sgd(s) => s.velocity.iter().map(|(n, t)| (format!("{SGD_VEL}{n}"), t)).collect(),
        }
    }

    /// Rebuilds an optimizer from its header entry and the `optim.*`
    /// tensors of a checkpoint, checked against the parameters.
    pub fn restore(meta: OptimizerMeta, tensors: &ParameterStore<T>, params: &ParameterStore<T>) -> Result<Self> {
        let take = |prefix: &str| -> Result<ParameterStore<T>> {
            let mut out = ParameterStore::new();
            for (name, p) in params.trainable() {
                let key = format!("{prefix}{name}");
                let t = tensors.get(&key).map_err(|_| Error::ShapeTable(format!("optimizer state `{key}` missing")))?;
                if t.shape() != p.shape() {
                    return Err(Error::ShapeTable(format!("optimizer state `{key}` has shape {:?}", t.shape())));
                }
                out.insert(name, t.clone());
            }
            Ok(out)
        };
        let expected = match meta {
            OptimizerMeta::AdamW { .. } => 2 * params.trainable().count(),
            OptimizerMeta::Sgd { .. } => params.trainable().count(),
        };
        if tensors.len() != expected {
            return Err(Error::ShapeTable(format!("{} optimizer tensors stored, {expected} expected", tensors.len())));
        }
        Ok(match meta {
            OptimizerMeta::AdamW { config, step } => {
                Optimizer::AdamW(AdamW { config, step, m: take(ADAMW_M)?, v: take(ADAMW_V)? })
            }
            OptimizerMeta::Sgd { config, step } => Optimizer::Sgd(Sgd { config, step, velocity: take(SGD_VEL)? }),
        })
    }
}

fn grad_for<'a, T: Scalar>(grads: &'a ParameterStore<T>, name: &str, p: &Tensor<T>) -> Result<&'a Tensor<T>> {
    let g = grads.get(name)?;
    if g.shape() != p.shape() {
        return Err(Error::Shape(format!("gradient of `{name}` has shape {:?}", g.shape())));
    }
    Ok(g)
}

impl<T: Scalar> AdamW<T> {
    fn update(&mut self, params: &mut ParameterStore<T>, grads: &ParameterStore<T>) -> Result<()> {
        let c = self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = T::from_f64_lossy(1.0 - c.lr * c.weight_decay);
        let step_size = T::from_f64_lossy(c.lr / bc1);
        let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let eps = T::from_f64_lossy(c.eps);
        let one = T::one();
        for (name, p) in params.iter_mut() {
            if is_buffer(name) {
                continue;
            }
            let g = grad_for(grads, name, p)?;
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *pi *= decay;
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let denom = vi.sqrt() / bc2_sqrt + eps;
                *pi -= step_size * *mi / denom;
            }
        }
        self.step += 1;
        Ok(())
    }
}

impl<T: Scalar> Sgd<T> {
    fn update(&mut self, params: &mut ParameterStore<T>, grads: &ParameterStore<T>) -> Result<()> {
        let lr = T::from_f64_lossy(self.config.lr);
        let mu = T::from_f64_lossy(self.config.momentum);
        for (name, p) in params.iter_mut() {
            if is_buffer(name) {
                continue;
            }
            let g = grad_for(grads, name, p)?;
            let vel = self.velocity.get_mut(name)?.data_mut();
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                *vi = mu * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        self.step += 1;
        Ok(())
    }
}
