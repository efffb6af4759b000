//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "WVPT" | u32 version | u32 header length | header JSON (UTF-8)
//! u32 tensor count
//! per tensor, sorted by name:
//!   u16 name length | name | u8 dtype (0 = f32, 1 = f64) | u8 rank | u32 dims[rank] | data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ConvExtractor, LossWeights};
use crate::model::{ModelConfig, WavePaint};
use crate::nn::HasParams;
use crate::params::ParameterStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::train::config::TrainConfig;
use crate::train::optim::{is_optimizer_tensor, Optimizer, OptimizerMeta};

pub const MAGIC: &[u8; 4] = b"WVPT";
pub const VERSION: u32 = 1;

/// Serializes a header string and a sorted tensor table.
pub fn encode_container<T: Scalar>(header: &str, tensors: &BTreeMap<String, &Tensor<T>>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let len = u32::try_from(header.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nlen = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&nlen.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Checkpoint(format!("{name}: rank too large")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("{name}: dimension too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn read_value<T: Scalar>(dtype: DType, bytes: &[u8]) -> T {
    if dtype == T::DTYPE {
        return T::read_le(bytes);
    }
    match dtype {
        DType::F32 => T::from_f64_lossy(f32::read_le(bytes) as f64),
        DType::F64 => T::from_f64_lossy(f64::read_le(bytes)),
    }
}

/// Parses a container; tensors stored in another float width are converted.
pub fn decode_container<T: Scalar>(bytes: &[u8]) -> Result<(String, BTreeMap<String, Tensor<T>>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let hlen = r.u32("header length")? as usize;
    let header = std::str::from_utf8(r.take(hlen, "header")?)
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?
        .to_string();
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let nlen = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        if prev.as_ref().is_some_and(|p| *p >= name) {
            return Err(Error::Checkpoint(format!("tensor `{name}` out of order")));
        }
        let code = r.u8("dtype")?;
        let dtype =
            DType::from_code(code).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype code {code}")))?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let size = dtype.size_of();
        let raw = r.take(numel.checked_mul(size).ok_or(Error::Truncated("tensor data"))?, "tensor data")?;
        let data: Vec<T> = raw.chunks_exact(size).map(|c| read_value(dtype, c)).collect();
        tensors.insert(name.clone(), Tensor::from_vec(&shape, data)?);
        prev = Some(name);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((header, tensors))
}

/// Writes to a temporary file next to `path`, then renames over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file = path.file_name().ok_or_else(|| Error::Checkpoint(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    loss: LossWeights,
    epoch: u32,
    optimizer: Option<OptimizerMeta>,
}

/// A trained network with everything needed to continue training it.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub loss: LossWeights,
    /// Completed epochs.
    pub epoch: u32,
    pub params: ParameterStore<T>,
    pub optimizer: Option<Optimizer<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Weights only, no training state.
    pub fn weights(model: ModelConfig, loss: LossWeights, params: ParameterStore<T>) -> Self {
        Checkpoint { model, train: None, loss, epoch: 0, params, optimizer: None }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            loss: self.loss,
            epoch: self.epoch,
            optimizer: self.optimizer.as_ref().map(|o| o.meta()),
        };
        let mut table: BTreeMap<String, &Tensor<T>> = self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(opt) = &self.optimizer {
            table.extend(opt.state_tensors());
        }
        encode_container(&serde_json::to_string(&header)?, &table)
    }

    /// Parses and checks the tensor table against the embedded model config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = decode_container::<T>(bytes)?;
        let header: Header = serde_json::from_str(&header)?;
        let mut params = ParameterStore::new();
        let mut optim = ParameterStore::new();
        for (name, t) in tensors {
            if is_optimizer_tensor(&name) {
                optim.insert(name, t);
            } else {
                params.insert(name, t);
            }
        }
        check_shape_table(&header.model, &params)?;
        let optimizer = match header.optimizer {
            Some(meta) => Some(Optimizer::restore(meta, &optim, &params)?),
            None if optim.is_empty() => None,
            None => return Err(Error::ShapeTable("optimizer tensors present without optimizer state".into())),
        };
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            loss: header.loss,
            epoch: header.epoch,
            params,
            optimizer,
        })
    }
}

/// Compares stored tensors with the names and shapes `model` expects.
pub fn check_shape_table<T: Scalar>(model: &ModelConfig, params: &ParameterStore<T>) -> Result<()> {
    let net = WavePaint::new(model.clone())?;
    let specs = net.param_specs();
    for s in &specs {
        match params.get(&s.name) {
            Ok(t) if t.shape() == s.shape.as_slice() => {}
            Ok(t) => {
                return Err(Error::ShapeTable(format!(
                    "`{}` stored as {:?}, model expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )))
            }
            Err(_) => return Err(Error::ShapeTable(format!("`{}` missing", s.name))),
        }
    }
    if params.len() != specs.len() {
        let extra = params.names().find(|n| !specs.iter().any(|s| s.name == *n)).unwrap_or("?");
        return Err(Error::ShapeTable(format!("unexpected tensor `{extra}`")));
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint that must hold weights for exactly `expected`.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, expected: &ModelConfig) -> Result<Checkpoint<T>> {
    let ckpt = load_checkpoint::<T>(path)?;
    check_shape_table(expected, &ckpt.params)?;
    Ok(ckpt)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtractorHeader {
    channels: Vec<usize>,
    strides: Vec<usize>,
    layer_weights: Vec<f64>,
}

/// Stores convolutional feature weights (`layers.{i}.weight`, `.bias`) in
/// the checkpoint container.
pub fn save_feature_extractor<T: Scalar>(
    path: &Path,
    channels: &[usize],
    strides: &[usize],
    layer_weights: &[f64],
    params: &ParameterStore<T>,
) -> Result<()> {
    let header = ExtractorHeader {
        channels: channels.to_vec(),
        strides: strides.to_vec(),
        layer_weights: layer_weights.to_vec(),
    };
    let table = params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    write_atomic(path, &encode_container(&serde_json::to_string(&header)?, &table)?)
}

pub fn load_feature_extractor<T: Scalar>(path: &Path) -> Result<ConvExtractor<T>> {
    let (header, tensors) = decode_container::<T>(&fs::read(path)?)?;
    let h: ExtractorHeader = serde_json::from_str(&header)?;
    let weights = h.layer_weights.iter().map(|&w| T::from_f64_lossy(w)).collect();
    ConvExtractor::new(&h.channels, &h.strides, weights, tensors.into_iter().collect())
}
