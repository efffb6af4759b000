//! WaveMix block, DepthConv and Decoder.

use crate::error::{shape_err, Result};
use crate::nn::{
    gelu, gelu_backward, BatchNorm2d, BnCache, Conv2d, ConvTranspose2d, DepthwiseConv2d, HasParams, Mode, ParamSpec,
    RunningStats,
};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::{dwt2_multilevel, idwt2_haar, SubbandSet};

/// Per-level path of a WaveMix block: subbands → MLP → upsample to the
/// first decomposition level's resolution.
#[derive(Clone, Debug)]
struct LevelPath {
    fc1: Conv2d,
    fc2: Conv2d,
    /// `None` at level 1, which is already at half resolution.
    up: Option<ConvTranspose2d>,
}

/// Multi-resolution token mixer.
///
/// `x → 1×1 conv (C→C/4) → Haar cascade → per level: stack (ll, lh, hl, hh)
/// → 1×1 conv (C→C·mult) → GELU → 1×1 conv (→C) → upsample to H/2 → sum →
/// transposed conv (k4, s2, p1) → batch-norm → + x`.
#[derive(Clone, Debug)]
pub struct WaveMixBlock {
    pub channels: usize,
    pub level: usize,
    reduce: Conv2d,
    levels: Vec<LevelPath>,
    up: ConvTranspose2d,
    bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
struct LevelCache<T> {
    stacked: Tensor<T>,
    hidden: Tensor<T>,
    act: Tensor<T>,
    mixed: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct WaveMixCache<T> {
    input: Tensor<T>,
    levels: Vec<LevelCache<T>>,
    summed: Tensor<T>,
    bn: BnCache<T>,
}

impl WaveMixBlock {
    pub fn new(prefix: &str, channels: usize, level: usize, mlp_mult: usize) -> Self {
        assert!(channels % 4 == 0 && (1..=3).contains(&level));
        let levels = (1..=level)
            .map(|l| {
                let p = format!("{prefix}.levels.{l}");
                let s = 1usize << (l - 1);
                LevelPath {
                    fc1: Conv2d::pointwise(format!("{p}.fc1"), channels, channels * mlp_mult),
                    fc2: Conv2d::pointwise(format!("{p}.fc2"), channels * mlp_mult, channels),
                    up: (l > 1).then(|| ConvTranspose2d::new(format!("{p}.up"), channels, channels, s, s, 0)),
                }
            })
            .collect();
        WaveMixBlock {
            channels,
            level,
            reduce: Conv2d::pointwise(format!("{prefix}.reduce"), channels, channels / 4),
            levels,
            up: ConvTranspose2d::new(format!("{prefix}.up"), channels, channels, 4, 2, 1),
            bn: BatchNorm2d::new(format!("{prefix}.bn"), channels),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        x: &Tensor<T>,
        mode: Mode,
        stats: &mut Vec<RunningStats<T>>,
    ) -> Result<(Tensor<T>, WaveMixCache<T>)> {
        x.expect_channels(self.channels, "wavemix block")?;
        let (_, _, h, w) = x.dims4();
        let f = 1 << self.level;
        if h % f != 0 || w % f != 0 {
            return shape_err(format!("wavemix block: {h}x{w} not divisible by {f}"));
        }
        let reduced = self.reduce.forward(params, x)?;
        let bands = dwt2_multilevel(&reduced, self.level)?;
        let mut summed: Option<Tensor<T>> = None;
        let mut caches = Vec::with_capacity(self.level);
        for (path, set) in self.levels.iter().zip(&bands) {
            let stacked = set.to_channels()?;
            let hidden = path.fc1.forward(params, &stacked)?;
            let act = gelu(&hidden);
            let mixed = path.fc2.forward(params, &act)?;
            let up = match &path.up {
                Some(u) => u.forward(params, &mixed)?,
                None => mixed.clone(),
            };
            match summed.as_mut() {
                Some(acc) => acc.add_assign(&up),
                None => summed = Some(up),
            }
            caches.push(LevelCache { stacked, hidden, act, mixed });
        }
        let summed = summed.expect("at least one level");
        let upsampled = self.up.forward(params, &summed)?;
        let (mut out, bn, st) = self.bn.forward(params, &upsampled, mode)?;
        stats.extend(st);
        out.add_assign(x);
        Ok((out, WaveMixCache { input: x.clone(), levels: caches, summed, bn }))
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        cache: &WaveMixCache<T>,
        dy: &Tensor<T>,
        grads: &mut ParameterStore<T>,
    ) -> Result<Tensor<T>> {
        let dup = self.bn.backward(params, &cache.bn, dy, grads)?;
        let dsum = self.up.backward(params, &cache.summed, &dup, grads)?;
        let q = self.channels / 4;
        // Walk levels deepest-first so each level's ll gradient can absorb
        // the gradient flowing back from the level below it.
        let mut carry: Option<Tensor<T>> = None;
        for (path, lc) in self.levels.iter().zip(&cache.levels).rev() {
            let dmixed = match &path.up {
                Some(u) => u.backward(params, &lc.mixed, &dsum, grads)?,
                None => dsum.clone(),
            };
            let dact = path.fc2.backward(params, &lc.act, &dmixed, grads)?;
            let dhidden = gelu_backward(&lc.hidden, &dact);
            let dstacked = path.fc1.backward(params, &lc.stacked, &dhidden, grads)?;
            let mut parts = dstacked.split_channels(&[q, q, q, q]).into_iter();
            let mut set = SubbandSet {
                ll: parts.next().unwrap(),
                lh: parts.next().unwrap(),
                hl: parts.next().unwrap(),
                hh: parts.next().unwrap(),
            };
            if let Some(c) = carry.take() {
                set.ll.add_assign(&c);
            }
            carry = Some(idwt2_haar(&set)?);
        }
        let dreduced = carry.expect("at least one level");
        let mut dx = self.reduce.backward(params, &cache.input, &dreduced, grads)?;
        dx.add_assign(dy);
        Ok(dx)
    }
}

impl HasParams for WaveMixBlock {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.reduce.param_specs();
        for p in &self.levels {
            v.extend(p.fc1.param_specs());
            v.extend(p.fc2.param_specs());
            if let Some(u) = &p.up {
                v.extend(u.param_specs());
            }
        }
        v.extend(self.up.param_specs());
        v.extend(self.bn.param_specs());
        v
    }
}

/// Depthwise 5×5 convolution → GELU → batch-norm. No residual.
#[derive(Clone, Debug)]
pub struct DepthConv {
    pub channels: usize,
    conv: DepthwiseConv2d,
    bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct DepthConvCache<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
    bn: BnCache<T>,
}

pub const DEPTHCONV_KERNEL: usize = 5;

impl DepthConv {
    pub fn new(prefix: &str, channels: usize) -> Self {
        DepthConv {
            channels,
            conv: DepthwiseConv2d::new(format!("{prefix}.conv"), channels, DEPTHCONV_KERNEL),
            bn: BatchNorm2d::new(format!("{prefix}.bn"), channels),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        x: &Tensor<T>,
        mode: Mode,
        stats: &mut Vec<RunningStats<T>>,
    ) -> Result<(Tensor<T>, DepthConvCache<T>)> {
        let pre = self.conv.forward(params, x)?;
        let act = gelu(&pre);
        let (out, bn, st) = self.bn.forward(params, &act, mode)?;
        stats.extend(st);
        Ok((out, DepthConvCache { input: x.clone(), pre, bn }))
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        cache: &DepthConvCache<T>,
        dy: &Tensor<T>,
        grads: &mut ParameterStore<T>,
    ) -> Result<Tensor<T>> {
        let dact = self.bn.backward(params, &cache.bn, dy, grads)?;
        let dpre = gelu_backward(&cache.pre, &dact);
        self.conv.backward(params, &cache.input, &dpre, grads)
    }
}

impl HasParams for DepthConv {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.conv.param_specs();
        v.extend(self.bn.param_specs());
        v
    }
}

/// Transposed convolution (k4, s2, p1) from 2C to C/2 channels, then
/// batch-norm. Doubles the spatial size exactly.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub in_channels: usize,
    pub out_channels: usize,
    up: ConvTranspose2d,
    bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
}

impl Decoder {
    /// `embed_dim` is C; the decoder maps 2C → C/2.
    pub fn new(prefix: &str, embed_dim: usize) -> Self {
        let (cin, cout) = (2 * embed_dim, embed_dim / 2);
        Decoder {
            in_channels: cin,
            out_channels: cout,
            up: ConvTranspose2d::new(format!("{prefix}.up"), cin, cout, 4, 2, 1),
            bn: BatchNorm2d::new(format!("{prefix}.bn"), cout),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        x: &Tensor<T>,
        mode: Mode,
        stats: &mut Vec<RunningStats<T>>,
    ) -> Result<(Tensor<T>, DecoderCache<T>)> {
        let up = self.up.forward(params, x)?;
        let (out, bn, st) = self.bn.forward(params, &up, mode)?;
        stats.extend(st);
        Ok((out, DecoderCache { input: x.clone(), bn }))
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        cache: &DecoderCache<T>,
        dy: &Tensor<T>,
        grads: &mut ParameterStore<T>,
    ) -> Result<Tensor<T>> {
        let dup = self.bn.backward(params, &cache.bn, dy, grads)?;
        self.up.backward(params, &cache.input, &dup, grads)
    }
}

impl HasParams for Decoder {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.up.param_specs();
        v.extend(self.bn.param_specs());
        v
    }
}
