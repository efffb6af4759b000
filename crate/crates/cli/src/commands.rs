//! The work behind each subcommand, kept out of `main` so tests can drive it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use wavepaint::io::{load_mask, load_rgb, rgb_to_tensor, save_mask, save_rgb};
use wavepaint::masks::GeneratedMask;
use wavepaint::metrics::{pooled_features, FidResult};
use wavepaint::train::{load_feature_extractor, ExperimentConfig, TrainReport};
use wavepaint::{
    default_policy, fid, generate_mask, l1_loss, l2_loss, load_checkpoint, lpips_distance, psnr, run_training,
    FeatureExtractor, IdentityExtractor, Inpainter, MaskKind, Tensor, WavePaint,
};

pub fn load_inpainter(ckpt: &Path) -> anyhow::Result<Inpainter<f32>> {
    let ck = load_checkpoint::<f32>(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let model = WavePaint::new(ck.model)?;
    Ok(Inpainter::new(model, ck.params)?)
}

pub fn train(config: &Path) -> anyhow::Result<TrainReport<f32>> {
    let cfg = ExperimentConfig::load(config).with_context(|| format!("reading {}", config.display()))?;
    Ok(run_training::<f32>(&cfg.train, &cfg.model, &cfg.loss)?)
}

pub fn infer(ckpt: &Path, image: &Path, mask: &Path, out: &Path) -> anyhow::Result<()> {
    let inp = load_inpainter(ckpt)?;
    let img = load_rgb(image).with_context(|| format!("reading {}", image.display()))?;
    let m = load_mask(mask).with_context(|| format!("reading {}", mask.display()))?;
    let result = inp.inpaint(&img, &m)?;
    save_rgb(&result, out).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

pub fn genmask(kind: MaskKind, height: usize, width: usize, seed: u64, out: &Path) -> anyhow::Result<GeneratedMask> {
    let g = generate_mask(&default_policy(kind), height, width, seed)?;
    if !g.converged {
        log::warn!(
            "{kind} mask for seed {seed} missed its coverage range after {} attempts (coverage {:.4})",
            g.attempts,
            g.coverage
        );
    }
    save_mask(&g.mask, out).with_context(|| format!("writing {}", out.display()))?;
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub name: String,
    pub coverage: f64,
    pub l1: f64,
    pub l2: f64,
    pub lpips: f64,
    pub psnr_db: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub kind: MaskKind,
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<PathBuf>,
    pub fid: FidResult,
}

impl EvalReport {
    fn mean(&self, f: impl Fn(&EvalRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_l1(&self) -> f64 {
        self.mean(|r| r.l1)
    }

    pub fn mean_l2(&self) -> f64 {
        self.mean(|r| r.l2)
    }

    pub fn mean_lpips(&self) -> f64 {
        self.mean(|r| r.lpips)
    }

    /// One row per image, then an aggregate block of `# key<TAB>value` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("image\tmask\tcoverage\tl1\tl2\tlpips\tpsnr_db\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.8}\t{:.8}\t{:.8}\t{:.4}",
                r.name, self.kind, r.coverage, r.l1, r.l2, r.lpips, r.psnr_db
            );
        }
        let _ = writeln!(s, "# aggregate");
        let _ = writeln!(s, "# images\t{}", self.rows.len());
        let _ = writeln!(s, "# skipped\t{}", self.skipped.len());
        let _ = writeln!(s, "# mean_l1\t{:.8}", self.mean_l1());
        let _ = writeln!(s, "# mean_l2\t{:.8}", self.mean_l2());
        let _ = writeln!(s, "# mean_lpips\t{:.8}", self.mean_lpips());
        let _ = writeln!(s, "# fid\t{:.8}", self.fid.value);
        let _ = writeln!(s, "# fid_regularized\t{}", self.fid.regularized);
        s
    }
}

/// Inpaints every decodable image of `dir` (name order) with a mask of
/// `kind` seeded by `seed + index`, and scores the composited output against
/// the original.
pub fn evaluate(
    inp: &Inpainter<f32>,
    dir: &Path,
    kind: MaskKind,
    seed: u64,
    feature_weights: Option<&Path>,
) -> anyhow::Result<EvalReport> {
    let fx: Box<dyn FeatureExtractor<f32>> = match feature_weights {
        Some(p) => Box::new(load_feature_extractor::<f32>(p).with_context(|| format!("reading {}", p.display()))?),
        None => Box::new(IdentityExtractor),
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();

    let policy = default_policy(kind);
    let (mut rows, mut skipped) = (Vec::new(), Vec::new());
    let (mut real, mut fake) = (Vec::new(), Vec::new());
    for path in files {
        let img = match load_rgb(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push(path);
                continue;
            }
        };
        let (h, w) = (img.height() as usize, img.width() as usize);
        let index = rows.len() as u64;
        let g = generate_mask(&policy, h, w, seed.wrapping_add(index))
            .with_context(|| format!("mask for {}", path.display()))?;
        let out = inp.inpaint(&img, &g.mask)?;
        let a: Tensor<f32> = rgb_to_tensor(&img);
        let b: Tensor<f32> = rgb_to_tensor(&out);
        rows.push(EvalRow {
            name: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            coverage: g.coverage,
            l1: l1_loss(&a, &b)? as f64,
            l2: l2_loss(&a, &b)? as f64,
            lpips: lpips_distance(&a, &b, fx.as_ref())? as f64,
            psnr_db: psnr(&a, &b)?.db(),
        });
        real.extend(pooled_features(&a, fx.as_ref())?);
        fake.extend(pooled_features(&b, fx.as_ref())?);
    }
    if rows.is_empty() {
        bail!("no readable images in {}", dir.display());
    }
    Ok(EvalReport { kind, rows, skipped, fid: fid(&real, &fake)? })
}
