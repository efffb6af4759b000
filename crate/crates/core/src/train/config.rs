use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{default_policy, MaskKind, MaskPolicy, MIN_SIDE};
use crate::metrics::LossWeights;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 1e-3, momentum: 0.9 }
    }
}

/// Relative frequency of each mask class when drawing a batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskWeights {
    pub narrow: f64,
    pub medium: f64,
    pub wide: f64,
}

impl Default for MaskWeights {
    fn default() -> Self {
        MaskWeights { narrow: 1.0, medium: 1.0, wide: 1.0 }
    }
}

impl MaskWeights {
    pub fn get(&self, kind: MaskKind) -> f64 {
        match kind {
            MaskKind::Narrow => self.narrow,
            MaskKind::Medium => self.medium,
            MaskKind::Wide => self.wide,
        }
    }
}

fn default_checkpoint_every() -> u32 {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub image_dir: PathBuf,
    pub output_dir: PathBuf,
    pub image_size: usize,
    pub batch_size: usize,
    pub total_epochs: u32,
    /// Epochs at the end run with SGD. Unset means `min(50, total / 2)`;
    /// larger than `total_epochs` is clipped.
    #[serde(default)]
    pub sgd_tail_epochs: Option<u32>,
    #[serde(default)]
    pub adamw: AdamWConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub mask_weights: MaskWeights,
    /// Replaces the built-in policy of each listed kind.
    #[serde(default)]
    pub mask_policies: Vec<MaskPolicy>,
    pub seed: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u32,
    /// Random horizontal flips with probability 0.5.
    #[serde(default = "default_true")]
    pub hflip: bool,
    /// Continue from this checkpoint.
    #[serde(default)]
    pub resume: Option<PathBuf>,
    /// Convolutional feature weights for the perceptual term; the identity
    /// extractor is used when unset.
    #[serde(default)]
    pub feature_weights: Option<PathBuf>,
}

impl TrainConfig {
    /// Minimal config with defaults for everything optional.
    pub fn new(
        image_dir: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
        image_size: usize,
        total_epochs: u32,
    ) -> Self {
        TrainConfig {
            image_dir: image_dir.into(),
            output_dir: output_dir.into(),
            image_size,
            batch_size: 4,
            total_epochs,
            sgd_tail_epochs: None,
            adamw: AdamWConfig::default(),
            sgd: SgdConfig::default(),
            mask_weights: MaskWeights::default(),
            mask_policies: Vec::new(),
            seed: 0,
            checkpoint_every: 1,
            hflip: true,
            resume: None,
            feature_weights: None,
        }
    }

    pub fn sgd_tail(&self) -> u32 {
        match self.sgd_tail_epochs {
            Some(t) => t.min(self.total_epochs),
            None => 50.min(self.total_epochs / 2),
        }
    }

    /// First epoch (0-based) trained with SGD.
    pub fn switch_epoch(&self) -> u32 {
        self.total_epochs - self.sgd_tail()
    }

    pub fn policy(&self, kind: MaskKind) -> MaskPolicy {
        self.mask_policies.iter().rev().find(|p| p.kind == kind).cloned().unwrap_or_else(|| default_policy(kind))
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.batch_size == 0 || self.total_epochs == 0 || self.checkpoint_every == 0 {
            return bad("image_size, batch_size, total_epochs and checkpoint_every must be positive".into());
        }
        let d = model.size_divisor();
        if self.image_size % d != 0 {
            return bad(format!("image_size {} must be divisible by {d}", self.image_size));
        }
        if !(self.adamw.lr > 0.0 && self.sgd.lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 || a.weight_decay < 0.0 {
            return bad(format!("invalid AdamW settings {a:?}"));
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) {
            return bad(format!("SGD momentum {} outside [0, 1)", self.sgd.momentum));
        }
        for p in &self.mask_policies {
            p.validate()?;
        }
        if self.image_size < MIN_SIDE {
            return bad(format!("image_size must be at least {MIN_SIDE}"));
        }
        let ws = MaskKind::ALL.map(|k| self.mask_weights.get(k));
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || ws.iter().sum::<f64>() <= 0.0 {
            return bad(format!("mask weights {:?} must be non-negative with a positive sum", self.mask_weights));
        }
        Ok(())
    }
}

/// Contents of a training config file: the network, the loss and the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Relative paths are resolved against the directory of the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let t = &mut cfg.train;
        for p in
            [&mut t.image_dir, &mut t.output_dir].into_iter().chain(t.resume.as_mut()).chain(t.feature_weights.as_mut())
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_defaults_and_clipping() {
        let mut c = TrainConfig::new("a", "b", 64, 300);
        assert_eq!(c.sgd_tail(), 50);
        assert_eq!(c.switch_epoch(), 250);
        c.total_epochs = 10;
        assert_eq!(c.sgd_tail(), 5);
        c.sgd_tail_epochs = Some(4);
        assert_eq!(c.switch_epoch(), 6);
        c.sgd_tail_epochs = Some(40);
        assert_eq!(c.sgd_tail(), 10);
        c.sgd_tail_epochs = Some(0);
        assert_eq!(c.switch_epoch(), 10);
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let text = r#"
            [model]
            modules = 1
            blocks_per_module = 2
            embed_dim = 32
            dwt_level = 1
            use_depthconv = true
            mlp_mult = 2

            [loss]
            alpha = 0.5
            lpips_weight = 1.0

            [train]
            image_dir = "data"
            output_dir = "runs/x"
            image_size = 64
            batch_size = 2
            total_epochs = 3
            seed = 7

            [train.mask_weights]
            wide = 0.0
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.train.adamw, AdamWConfig::default());
        assert_eq!(cfg.train.mask_weights.narrow, 1.0);
        assert_eq!(cfg.train.mask_weights.wide, 0.0);
        assert!(cfg.train.hflip);
        cfg.train.validate(&cfg.model).unwrap();
        let back = ExperimentConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_model_table_uses_defaults() {
        let text = "[model]\nmodules = 3\n[loss]\nalpha=0.5\nlpips_weight=1\n[train]\nimage_dir='a'\noutput_dir='b'\nimage_size=64\nbatch_size=1\ntotal_epochs=1\nseed=0\n";
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.model, ModelConfig { modules: 3, ..Default::default() });
    }

    #[test]
    fn loss_weights_are_mandatory() {
        let text = "[train]\nimage_dir='a'\noutput_dir='b'\nimage_size=64\nbatch_size=1\ntotal_epochs=1\nseed=0\n";
        assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_field_rejected() {
        let text = "[loss]\nalpha=0.5\nlpips_weight=1\nbeta=3\n[train]\nimage_dir='a'\noutput_dir='b'\nimage_size=64\nbatch_size=1\ntotal_epochs=1\nseed=0\n";
        assert!(ExperimentConfig::from_toml(text).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let m = ModelConfig::default();
        let mut c = TrainConfig::new("a", "b", 62, 3);
        assert!(c.validate(&m).is_err());
        c.image_size = 64;
        c.validate(&m).unwrap();
        c.adamw.lr = 0.0;
        assert!(c.validate(&m).is_err());
        c.adamw.lr = 1e-3;
        c.mask_weights = MaskWeights { narrow: 0.0, medium: 0.0, wide: 0.0 };
        assert!(c.validate(&m).is_err());
    }
}
