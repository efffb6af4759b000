//! Seeded free-form hole masks in three severity classes.
//!
//! A mask is drawn as a few random-walk brush strokes (Bresenham segments
//! stamped with an integer disc) plus optional axis-aligned boxes. Only the
//! vertex placement uses floating point, through `libm`, so the same
//! `(policy, h, w, seed)` yields the same bitmap on every platform.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Masks are rejection-resampled at most this many times.
pub const MAX_ATTEMPTS: u32 = 16;
pub const MIN_SIDE: usize = 32;
/// Brush widths are specified at this resolution and scaled with the image.
pub const REFERENCE_SIZE: f64 = 256.0;
const MAX_TURN_DEG: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Narrow,
    Medium,
    Wide,
}

impl MaskKind {
    pub const ALL: [MaskKind; 3] = [MaskKind::Narrow, MaskKind::Medium, MaskKind::Wide];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Narrow => "narrow",
            MaskKind::Medium => "medium",
            MaskKind::Wide => "wide",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "narrow" => Ok(MaskKind::Narrow),
            "medium" => Ok(MaskKind::Medium),
            "wide" => Ok(MaskKind::Wide),
            other => Err(Error::Config(format!("unknown mask kind `{other}`"))),
        }
    }
}

/// Inclusive ranges controlling one mask class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub kind: MaskKind,
    pub stroke_count_range: [u32; 2],
    pub brush_width_range_px: [u32; 2],
    pub vertex_count_range: [u32; 2],
    pub box_count_range: [u32; 2],
    pub box_size_frac_range: [f64; 2],
    /// Accepted fraction of hole pixels.
    pub target_coverage_range: [f64; 2],
}

/// Default settings for each class.
pub fn default_policy(kind: MaskKind) -> MaskPolicy {
    match kind {
        MaskKind::Narrow => MaskPolicy {
            kind,
            stroke_count_range: [1, 4],
            brush_width_range_px: [5, 15],
            vertex_count_range: [2, 6],
            box_count_range: [0, 0],
            box_size_frac_range: [0.0, 0.0],
            target_coverage_range: [0.01, 0.10],
        },
        MaskKind::Medium => MaskPolicy {
            kind,
            stroke_count_range: [1, 4],
            brush_width_range_px: [15, 35],
            vertex_count_range: [2, 6],
            box_count_range: [0, 1],
            box_size_frac_range: [0.10, 0.25],
            target_coverage_range: [0.10, 0.30],
        },
        MaskKind::Wide => MaskPolicy {
            kind,
            stroke_count_range: [1, 3],
            brush_width_range_px: [30, 70],
            vertex_count_range: [3, 8],
            box_count_range: [0, 2],
            box_size_frac_range: [0.20, 0.40],
            target_coverage_range: [0.30, 0.60],
        },
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [u32; 2], name: &str| {
            if r[0] > r[1] {
                Err(Error::Config(format!("{name}: range {r:?} is not ordered")))
            } else {
                Ok(())
            }
        };
        ordered(self.stroke_count_range, "stroke_count_range")?;
        ordered(self.brush_width_range_px, "brush_width_range_px")?;
        ordered(self.vertex_count_range, "vertex_count_range")?;
        ordered(self.box_count_range, "box_count_range")?;
        if self.vertex_count_range[0] < 2 {
            return Err(Error::Config("strokes need at least 2 vertices".into()));
        }
        if self.brush_width_range_px[0] == 0 {
            return Err(Error::Config("brush width must be positive".into()));
        }
        let [b0, b1] = self.box_size_frac_range;
        if !(0.0..=1.0).contains(&b0) || !(0.0..=1.0).contains(&b1) || b0 > b1 {
            return Err(Error::Config(format!("box_size_frac_range {:?} invalid", self.box_size_frac_range)));
        }
        let [c0, c1] = self.target_coverage_range;
        if !(c0 > 0.0 && c1 < 1.0 && c0 <= c1) {
            return Err(Error::Config(format!(
                "target_coverage_range {:?} must be ordered inside (0, 1)",
                self.target_coverage_range
            )));
        }
        Ok(())
    }
}

/// Binary raster, row-major, 1 = known pixel, 0 = hole.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask({}x{}, coverage {:.4})", self.height, self.width, self.coverage())
    }
}

impl Mask {
    pub fn all_known(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![1; height * width] }
    }

    /// From raw values; anything non-zero counts as known.
    pub fn from_known(height: usize, width: usize, known: Vec<u8>) -> Result<Self> {
        if known.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                known.len()
            )));
        }
        Ok(Mask { height, width, data: known.into_iter().map(|v| u8::from(v != 0)).collect() })
    }

    pub fn is_known(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn values(&self) -> &[u8] {
        &self.data
    }

    pub fn holes(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }

    /// Fraction of hole pixels.
    pub fn coverage(&self) -> f64 {
        self.holes() as f64 / self.data.len() as f64
    }

    pub fn set_hole(&mut self, y: usize, x: usize) {
        self.data[y * self.width + x] = 0;
    }

    /// `(1, 1, h, w)` tensor of 0/1 values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, 1, self.height, self.width], |i| if self.data[i] == 1 { T::one() } else { T::zero() })
    }

    /// 8-bit grey levels: 0 for holes, 255 for known pixels.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v * 255).collect()
    }

    fn fill_span(&mut self, y: i64, x0: i64, x1: i64) {
        if y < 0 || y >= self.height as i64 {
            return;
        }
        let lo = x0.max(0);
        let hi = x1.min(self.width as i64 - 1);
        if lo > hi {
            return;
        }
        let row = y as usize * self.width;
        self.data[row + lo as usize..=row + hi as usize].fill(0);
    }
}

/// Result of [`generate_mask`].
#[derive(Clone, Debug)]
pub struct GeneratedMask {
    pub mask: Mask,
    pub coverage: f64,
    /// False when no attempt landed inside the target coverage range; the
    /// closest attempt is returned.
    pub converged: bool,
    pub attempts: u32,
}

fn isqrt(v: i64) -> i64 {
    let mut r = (v as f64).sqrt() as i64;
    while r * r > v {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    r
}

/// Integer disc as per-row half widths.
fn disc_spans(radius: i64) -> Vec<i64> {
    (-radius..=radius).map(|dy| isqrt(radius * radius - dy * dy)).collect()
}

fn stamp(mask: &mut Mask, cx: i64, cy: i64, radius: i64, spans: &[i64]) {
    for (i, &half) in spans.iter().enumerate() {
        let y = cy - radius + i as i64;
        mask.fill_span(y, cx - half, cx + half);
    }
}

fn bresenham(x0: i64, y0: i64, x1: i64, y1: i64, mut visit: impl FnMut(i64, i64)) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        visit(x, y);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn range_u32(rng: &mut ChaCha8Rng, r: [u32; 2]) -> u32 {
    rng.random_range(r[0]..=r[1])
}

fn draw_attempt(policy: &MaskPolicy, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Mask {
    let mut mask = Mask::all_known(h, w);
    let scale = h.min(w) as f64 / REFERENCE_SIZE;
    let (wf, hf) = (w as f64, h as f64);
    let strokes = range_u32(rng, policy.stroke_count_range);
    for _ in 0..strokes {
        let width_ref = range_u32(rng, policy.brush_width_range_px) as f64;
        let width = ((width_ref * scale).round() as i64).max(1);
        let radius = width / 2;
        let spans = disc_spans(radius);
        let vertices = range_u32(rng, policy.vertex_count_range);
        let mut x = rng.random_range(0.0..wf);
        let mut y = rng.random_range(0.0..hf);
        let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
        let mut prev = (x as i64, y as i64);
        stamp(&mut mask, prev.0, prev.1, radius, &spans);
        for _ in 1..vertices {
            angle += rng.random_range(-MAX_TURN_DEG..=MAX_TURN_DEG).to_radians();
            let len = rng.random_range(wf / 16.0..=wf / 4.0);
            x = (x + len * libm::cos(angle)).clamp(0.0, wf - 1.0);
            y = (y + len * libm::sin(angle)).clamp(0.0, hf - 1.0);
            let next = (x as i64, y as i64);
            bresenham(prev.0, prev.1, next.0, next.1, |px, py| stamp(&mut mask, px, py, radius, &spans));
            prev = next;
        }
    }
    let boxes = range_u32(rng, policy.box_count_range);
    let [f0, f1] = policy.box_size_frac_range;
    for _ in 0..boxes {
        let bh = ((rng.random_range(f0..=f1) * hf).round() as usize).clamp(1, h);
        let bw = ((rng.random_range(f0..=f1) * wf).round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - bh) as i64;
        let left = rng.random_range(0..=w - bw) as i64;
        for yy in top..top + bh as i64 {
            mask.fill_span(yy, left, left + bw as i64 - 1);
        }
    }
    mask
}

fn distance_to_range(v: f64, [lo, hi]: [f64; 2]) -> f64 {
    if v < lo {
        lo - v
    } else if v > hi {
        v - hi
    } else {
        0.0
    }
}

/// Draws a mask for `policy`, resampling up to [`MAX_ATTEMPTS`] times until
/// its coverage falls inside the policy's target range.
pub fn generate_mask(policy: &MaskPolicy, h: usize, w: usize, seed: u64) -> Result<GeneratedMask> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::Shape(format!("mask must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")));
    }
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Mask)> = None;
    for attempt in 1..=MAX_ATTEMPTS {
        let m = draw_attempt(policy, h, w, &mut rng);
        let cov = m.coverage();
        let dist = distance_to_range(cov, policy.target_coverage_range);
        if dist == 0.0 {
            return Ok(GeneratedMask { coverage: cov, mask: m, converged: true, attempts: attempt });
        }
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, m));
        }
    }
    let (_, mut mask) = best.expect("at least one attempt");
    // keep at least one hole and one known pixel
    if mask.holes() == 0 {
        mask.set_hole(h / 2, w / 2);
    } else if mask.holes() == h * w {
        mask.data[0] = 1;
    }
    log::warn!(
        "{} mask {h}x{w} seed {seed}: coverage {:.4} outside {:?} after {MAX_ATTEMPTS} attempts",
        policy.kind,
        mask.coverage(),
        policy.target_coverage_range
    );
    Ok(GeneratedMask { coverage: mask.coverage(), mask, converged: false, attempts: MAX_ATTEMPTS })
}
