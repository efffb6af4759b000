//! PNG decoding and encoding, conversions between 8-bit images and tensors,
//! and the reflect padding used for sizes the network cannot take directly.

use std::io::Cursor;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{shape_err, Error, Result};
use crate::masks::Mask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8())
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn encode_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_rgb(img)?)?;
    Ok(())
}

/// Grey PNG with 0 for holes and 255 for known pixels. Any other level is
/// rejected rather than thresholded.
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let g = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
    gray_to_mask(&g)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    gray_to_mask(&image::open(path)?.to_luma8())
}

fn gray_to_mask(g: &GrayImage) -> Result<Mask> {
    if let Some(v) = g.as_raw().iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::Shape(format!("mask pixels must be 0 or 255, found {v}")));
    }
    Mask::from_known(g.height() as usize, g.width() as usize, g.as_raw().clone())
}

pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    let g = GrayImage::from_raw(mask.width as u32, mask.height as u32, mask.to_gray8())
        .expect("buffer length matches dimensions");
    let mut buf = Cursor::new(Vec::new());
    g.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    std::fs::write(path, encode_mask(mask)?)?;
    Ok(())
}

/// Bilinear resize to `size × size`; a no-op when already that size.
pub fn resize_square(img: &RgbImage, size: u32) -> RgbImage {
    if img.width() == size && img.height() == size {
        return img.clone();
    }
    imageops::resize(img, size, size, FilterType::Triangle)
}

/// `(1, 3, h, w)` tensor with values `v / 255`.
pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let scale = T::from_f64_lossy(1.0 / 255.0);
    let vals: Vec<T> = img.as_raw().iter().map(|&v| T::from_u8(v).unwrap() * scale).collect();
    Tensor::from_hwc(h, w, 3, &vals).expect("RGB buffer length matches dimensions")
}

pub fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Image `n` of a 3-channel batch, clamped to `[0, 1]` and rounded.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<RgbImage> {
    let (_, c, h, w) = t.expect_rank4("image")?;
    if c != 3 {
        return shape_err(format!("expected 3 channels, got {c}"));
    }
    let bytes = t.to_hwc(n).into_iter().map(to_u8).collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer length matches dimensions"))
}

/// Mirror index without repeating the edge sample (`d c b | a b c d | c b a`).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Extends every image of `t` to `h × w` by mirroring at the bottom and
/// right edges.
pub fn reflect_pad<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, h0, w0) = t.expect_rank4("pad input")?;
    if h < h0 || w < w0 {
        return shape_err(format!("cannot pad {h0}x{w0} down to {h}x{w}"));
    }
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for b in 0..n {
        let src = t.image(b);
        let dst = out.image_mut(b);
        for ch in 0..c {
            for y in 0..h {
                let sy = reflect(y, h0);
                for x in 0..w {
                    dst[(ch * h + y) * w + x] = src[(ch * h0 + sy) * w0 + reflect(x, w0)];
                }
            }
        }
    }
    Ok(out)
}

/// Top-left `h × w` window of every image.
pub fn crop<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, h0, w0) = t.expect_rank4("crop input")?;
    if h > h0 || w > w0 {
        return shape_err(format!("cannot crop {h0}x{w0} to {h}x{w}"));
    }
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for b in 0..n {
        let src = t.image(b);
        let dst = out.image_mut(b);
        for ch in 0..c {
            for y in 0..h {
                let s = (ch * h0 + y) * w0;
                dst[(ch * h + y) * w..(ch * h + y + 1) * w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    Ok(out)
}

/// Smallest multiple of `d` that is at least `v`.
pub fn round_up(v: usize, d: usize) -> usize {
    v.div_ceil(d) * d
}
