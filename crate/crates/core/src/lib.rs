//! Wavelet token-mixing image inpainting.
//!
//! The network is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`). Training and inference use `f32`; the `f64`
//! instantiation exists for gradient checking.

pub mod error;
pub mod infer;
pub mod io;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use infer::Inpainter;
pub use masks::{default_policy, generate_mask, Mask, MaskKind, MaskPolicy};
pub use metrics::{
    fid, hybrid_loss, l1_loss, l2_loss, lpips_distance, psnr, FeatureExtractor, IdentityExtractor, LossWeights,
};
pub use model::{composite, count_parameters, ModelConfig, WavePaint};
pub use params::ParameterStore;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
pub use train::{load_checkpoint, run_training, save_checkpoint, train_step, Checkpoint, TrainConfig};
pub use wavelet::{dwt2_haar, dwt2_multilevel, idwt2_haar, idwt2_multilevel, SubbandSet};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParameterStore32 = ParameterStore<f32>;
pub type ParameterStore64 = ParameterStore<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Inpainter32 = Inpainter<f32>;
