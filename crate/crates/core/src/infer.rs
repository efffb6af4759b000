//! Single-image inference on 8-bit images.

use image::RgbImage;

use crate::error::{shape_err, Result};
use crate::io::{crop, reflect_pad, rgb_to_tensor, round_up, to_u8};
use crate::masks::Mask;
use crate::model::WavePaint;
use crate::nn::Mode;
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A network and its weights, read-only after construction.
#[derive(Clone, Debug)]
pub struct Inpainter<T> {
    model: WavePaint,
    params: ParameterStore<T>,
}

impl<T: Scalar> Inpainter<T> {
    pub fn new(model: WavePaint, params: ParameterStore<T>) -> Result<Self> {
        model.check_params(&params)?;
        Ok(Inpainter { model, params })
    }

    pub fn model(&self) -> &WavePaint {
        &self.model
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    /// Raw prediction ŷ for an image of any size. Sizes the network cannot
    /// take are mirrored out to the next valid size and cropped back.
    pub fn predict(&self, img: &RgbImage, mask: &Mask) -> Result<Tensor<T>> {
        let (h, w) = (img.height() as usize, img.width() as usize);
        if mask.height != h || mask.width != w {
            return shape_err(format!("image is {h}x{w} but mask is {}x{}", mask.height, mask.width));
        }
        let d = self.model.config().size_divisor();
        let (ph, pw) = (round_up(h, d), round_up(w, d));
        let x = reflect_pad(&rgb_to_tensor::<T>(img), ph, pw)?;
        let m = reflect_pad(&mask.to_tensor::<T>(), ph, pw)?;
        let y = self.model.forward(&self.params, &x, &m, Mode::Eval)?;
        crop(&y, h, w)
    }

    /// Inpainted image. Known pixels are copied from `img` byte for byte;
    /// hole pixels are the clamped, rounded prediction.
    pub fn inpaint(&self, img: &RgbImage, mask: &Mask) -> Result<RgbImage> {
        let y = self.predict(img, mask)?;
        let (h, w) = (img.height() as usize, img.width() as usize);
        let hw = h * w;
        let plane = y.image(0);
        let mut out = img.clone();
        for (p, px) in out.pixels_mut().enumerate() {
            if mask.values()[p] == 0 {
                for ch in 0..3 {
                    px.0[ch] = to_u8(plane[ch * hw + p]);
                }
            }
        }
        Ok(out)
    }
}
