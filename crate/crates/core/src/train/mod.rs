//! Optimization loop, schedule and persistence.

pub mod checkpoint;
mod config;
mod data;
mod optim;

pub use checkpoint::{
    decode_container, encode_container, load_checkpoint, load_checkpoint_for, load_feature_extractor, save_checkpoint,
    save_feature_extractor, Checkpoint,
};
pub use config::{AdamWConfig, ExperimentConfig, MaskWeights, SgdConfig, TrainConfig};
pub use data::{load_dataset, Dataset};
pub use optim::{Optimizer, OptimizerKind, OptimizerMeta};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;

use image::{imageops, RgbImage};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::rgb_to_tensor;
use crate::masks::{generate_mask, MaskKind};
use crate::metrics::{hybrid_loss_with_grad, FeatureExtractor, IdentityExtractor, LossBreakdown, LossWeights};
use crate::model::{ModelConfig, WavePaint};
use crate::nn::Mode;
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One optimization step on a batch: forward, hybrid loss on the blended
/// output, backward, parameter update, running-statistics update.
///
/// A non-finite loss or gradient aborts the step before anything changes.
pub fn train_step<T: Scalar>(
    model: &WavePaint,
    params: &mut ParameterStore<T>,
    opt: &mut Optimizer<T>,
    x: &Tensor<T>,
    mask: &Tensor<T>,
    weights: &LossWeights,
    fx: &dyn FeatureExtractor<T>,
) -> Result<LossBreakdown<T>> {
    let (y_hat, tape) = model.forward_tape(params, x, mask, Mode::Train)?;
    let (loss, dy) = hybrid_loss_with_grad(&y_hat, x, mask, weights, fx, true)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!("loss ({})", loss.total)));
    }
    let grads = model.backward(params, &tape, &dy.expect("gradient requested"))?;
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    opt.step(params, &grads)?;
    WavePaint::apply_running_stats(params, &tape)?;
    Ok(loss)
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: u32,
    pub optimizer: OptimizerKind,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub lpips: f64,
    pub steps: usize,
    pub failed_steps: usize,
}

impl EpochStats {
    /// `epoch<TAB>split<TAB>loss<TAB>l1<TAB>l2<TAB>lpips`
    pub fn log_line(&self) -> String {
        format!("{}\ttrain\t{:.8}\t{:.8}\t{:.8}\t{:.8}", self.epoch, self.loss, self.l1, self.l2, self.lpips)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub checkpoint: Checkpoint<T>,
    /// Epochs run by this call; a resumed run starts at the checkpoint.
    pub history: Vec<EpochStats>,
    pub skipped_files: usize,
    pub metrics_log: PathBuf,
}

fn stack<T: Scalar>(parts: &[Tensor<T>]) -> Tensor<T> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.len();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::from_vec(&shape, data).expect("uniform batch")
}

/// Deterministic stream for one epoch, independent of earlier epochs so a
/// resumed run draws the same batches.
fn epoch_rng(seed: u64, epoch: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn open_log(path: &std::path::Path, append: bool) -> Result<fs::File> {
    let mut f = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
    if !append {
        writeln!(f, "# epoch\tsplit\tloss\tl1\tl2\tlpips")?;
    }
    Ok(f)
}

/// Trains `mcfg` on `cfg.image_dir`: AdamW for epochs `[0, total − tail)`,
/// SGD with fresh momentum for the rest. Writes `metrics.tsv`,
/// `epoch_NNNN.wvpt` every `checkpoint_every` epochs and `last.wvpt` into
/// `cfg.output_dir`.
pub fn run_training<T: Scalar>(cfg: &TrainConfig, mcfg: &ModelConfig, weights: &LossWeights) -> Result<TrainReport<T>> {
    cfg.validate(mcfg)?;
    weights.validate()?;
    let model = WavePaint::new(mcfg.clone())?;
    let data = load_dataset(&cfg.image_dir, cfg.image_size as u32)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let fx: Box<dyn FeatureExtractor<T>> = match &cfg.feature_weights {
        Some(p) => Box::new(load_feature_extractor::<T>(p)?),
        None => Box::new(IdentityExtractor),
    };

    let (mut params, mut opt, start) = match &cfg.resume {
        Some(path) => {
            let ck = load_checkpoint_for::<T>(path, mcfg)?;
            log::info!("resuming from {} at epoch {}", path.display(), ck.epoch);
            let opt = ck.optimizer.unwrap_or_else(|| Optimizer::adamw(cfg.adamw, &ck.params));
            (ck.params, opt, ck.epoch)
        }
        None => {
            let p = model.init_params::<T>(cfg.seed);
            let o = Optimizer::adamw(cfg.adamw, &p);
            (p, o, 0)
        }
    };

    let log_path = cfg.output_dir.join("metrics.tsv");
    let mut log_file = open_log(&log_path, cfg.resume.is_some())?;
    let switch = cfg.switch_epoch();
    let kind_dist = WeightedIndex::new(MaskKind::ALL.map(|k| cfg.mask_weights.get(k)))
        .map_err(|e| Error::Config(format!("mask weights: {e}")))?;
    let policies = MaskKind::ALL.map(|k| cfg.policy(k));
    let size = cfg.image_size;
    let mut history = Vec::new();

    for epoch in start..cfg.total_epochs {
        if epoch >= switch && opt.kind() == OptimizerKind::AdamW {
            opt = Optimizer::sgd(cfg.sgd, &params);
            writeln!(log_file, "# optimizer sgd from epoch {epoch}")?;
            log::info!("epoch {epoch}: switching to SGD");
        }
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..data.images.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let (mut steps, mut failed) = (0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let policy = &policies[kind_dist.sample(&mut rng)];
            let mut xs = Vec::with_capacity(chunk.len());
            let mut ms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let flip = cfg.hflip && rng.random_bool(0.5);
                let img: RgbImage =
                    if flip { imageops::flip_horizontal(&data.images[i]) } else { data.images[i].clone() };
                let mask_seed: u64 = rng.random();
                xs.push(rgb_to_tensor::<T>(&img));
                ms.push(generate_mask(policy, size, size, mask_seed)?.mask.to_tensor::<T>());
            }
            let (x, m) = (stack(&xs), stack(&ms));
            match train_step(&model, &mut params, &mut opt, &x, &m, weights, fx.as_ref()) {
                Ok(l) => {
                    for (s, v) in sums.iter_mut().zip([l.total, l.l1, l.l2, l.lpips]) {
                        *s += v.as_f64();
                    }
                    steps += 1;
                }
                Err(Error::NonFinite(what)) => {
                    log::warn!("epoch {epoch}: step skipped, non-finite {what}");
                    failed += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if steps == 0 {
            return Err(Error::NonFinite(format!("every step of epoch {epoch}")));
        }
        let n = steps as f64;
        let stats = EpochStats {
            epoch,
            optimizer: opt.kind(),
            loss: sums[0] / n,
            l1: sums[1] / n,
            l2: sums[2] / n,
            lpips: sums[3] / n,
            steps,
            failed_steps: failed,
        };
        writeln!(log_file, "{}", stats.log_line())?;
        log_file.flush()?;
        log::info!("epoch {epoch} [{}]: loss {:.5}", stats.optimizer, stats.loss);
        history.push(stats);

        let done = epoch + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.total_epochs {
            let ck = Checkpoint {
                model: mcfg.clone(),
                train: Some(cfg.clone()),
                loss: *weights,
                epoch: done,
                params: params.clone(),
                optimizer: Some(opt.clone()),
            };
            save_checkpoint(&cfg.output_dir.join(format!("epoch_{done:04}.wvpt")), &ck)?;
        }
    }

    let checkpoint = Checkpoint {
        model: mcfg.clone(),
        train: Some(cfg.clone()),
        loss: *weights,
        epoch: cfg.total_epochs.max(start),
        params,
        optimizer: Some(opt),
    };
    save_checkpoint(&cfg.output_dir.join("last.wvpt"), &checkpoint)?;
    Ok(TrainReport { checkpoint, history, skipped_files: data.skipped, metrics_log: log_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::save_rgb;

    fn tiny() -> ModelConfig {
        ModelConfig { modules: 1, blocks_per_module: 1, embed_dim: 8, ..Default::default() }
    }

    fn dataset(dir: &std::path::Path, n: u32) {
        for i in 0..n {
            let img = RgbImage::from_fn(40, 36, |x, y| image::Rgb([(x * 5 + i * 40) as u8, (y * 7) as u8, 120]));
            save_rgb(&img, &dir.join(format!("{i}.png"))).unwrap();
        }
    }

    #[test]
    fn all_known_mask_gives_zero_loss() {
        let model = WavePaint::new(tiny()).unwrap();
        let mut p = model.init_params::<f64>(0);
        let mut opt = Optimizer::adamw(AdamWConfig::default(), &p);
        let x = Tensor::from_fn(&[1, 3, 32, 32], |i| (i % 17) as f64 / 17.0);
        let m = Tensor::full(&[1, 1, 32, 32], 1.0);
        let w = LossWeights { alpha: 0.0, lpips_weight: 0.0 };
        let l = train_step(&model, &mut p, &mut opt, &x, &m, &w, &IdentityExtractor).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn zero_lr_step_leaves_trainable_parameters() {
        let model = WavePaint::new(tiny()).unwrap();
        let p0 = model.init_params::<f32>(0);
        let mut p = p0.clone();
        let mut opt = Optimizer::adamw(AdamWConfig { lr: 0.0, ..Default::default() }, &p);
        let x = Tensor::from_fn(&[2, 3, 32, 32], |i| (i % 13) as f32 / 13.0);
        let m = Tensor::from_fn(&[2, 1, 32, 32], |i| if (i / 32) % 32 < 16 { 1.0 } else { 0.0 });
        train_step(&model, &mut p, &mut opt, &x, &m, &LossWeights::default(), &IdentityExtractor).unwrap();
        for (name, t) in p0.trainable() {
            let u = p.get(name).unwrap();
            assert!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{name}");
        }
    }

    #[test]
    fn schedule_switches_at_boundary() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = dir.path().join("imgs");
        fs::create_dir(&imgs).unwrap();
        dataset(&imgs, 2);
        let mut cfg = TrainConfig::new(&imgs, dir.path().join("out"), 32, 10);
        cfg.sgd_tail_epochs = Some(4);
        cfg.batch_size = 2;
        cfg.checkpoint_every = 5;
        let r = run_training::<f32>(&cfg, &tiny(), &LossWeights::default()).unwrap();
        let kinds: Vec<_> = r.history.iter().map(|s| s.optimizer).collect();
        assert!(kinds[..6].iter().all(|&k| k == OptimizerKind::AdamW));
        assert!(kinds[6..].iter().all(|&k| k == OptimizerKind::Sgd));
        let log = fs::read_to_string(&r.metrics_log).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        let marker = lines.iter().position(|l| *l == "# optimizer sgd from epoch 6").unwrap();
        assert!(lines[marker - 1].starts_with("5\ttrain\t"));
        assert!(lines[marker + 1].starts_with("6\ttrain\t"));
        assert_eq!(lines.iter().filter(|l| !l.starts_with('#')).count(), 10);
        assert!(dir.path().join("out/epoch_0005.wvpt").exists());
        assert!(dir.path().join("out/epoch_0010.wvpt").exists());
        assert!(dir.path().join("out/last.wvpt").exists());
    }

    #[test]
    fn zero_tail_is_pure_adamw() {
        let dir = tempfile::tempdir().unwrap();
        dataset(dir.path(), 1);
        let mut cfg = TrainConfig::new(dir.path(), dir.path().join("out"), 32, 2);
        cfg.sgd_tail_epochs = Some(0);
        let r = run_training::<f32>(&cfg, &tiny(), &LossWeights::default()).unwrap();
        assert!(r.history.iter().all(|s| s.optimizer == OptimizerKind::AdamW));
        assert!(!fs::read_to_string(&r.metrics_log).unwrap().contains("optimizer sgd"));
    }

    #[test]
    fn unreadable_files_counted() {
        let dir = tempfile::tempdir().unwrap();
        dataset(dir.path(), 1);
        fs::write(dir.path().join("broken.png"), b"nope").unwrap();
        let mut cfg = TrainConfig::new(dir.path(), dir.path().join("out"), 32, 1);
        cfg.checkpoint_every = 1;
        let r = run_training::<f32>(&cfg, &tiny(), &LossWeights::default()).unwrap();
        assert_eq!(r.skipped_files, 1);
    }
}
