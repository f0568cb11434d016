//! Parameter layout, initialization and the TAIP container.
//!
//! Layout on disk (little-endian): `"TAIP"`, version `u16`, tensor count
//! `u32`, then per tensor: name length `u16`, UTF-8 name, rank `u8`, one `u32`
//! per dimension, and the data as `f32`.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::PipelineConfig;
use crate::autodiff::numel;
use crate::error::{Error, Result};

pub const TAIP_MAGIC: [u8; 4] = *b"TAIP";
pub const TAIP_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
    HeUniform { fan_in: usize },
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

pub fn conv_name(k: usize) -> String {
    format!("hsa.conv{k}")
}

/// Every learned tensor in canonical order.
pub fn layout(config: &PipelineConfig) -> Vec<TensorSpec> {
    let c = config.channels;
    let k = config.mask_count;
    let (gh, rh) = (config.glc_hidden, config.rgfc_hidden);
    let mut specs = Vec::new();
    let mut layer = |name: &str, weight: Vec<usize>, fan_in: usize, zero: bool| {
        let outputs = weight[0];
        specs.push(TensorSpec {
            name: format!("{name}.weight"),
            shape: weight,
            init: if zero { Init::Zero } else { Init::HeUniform { fan_in } },
        });
        specs.push(TensorSpec {
            name: format!("{name}.bias"),
            shape: vec![outputs],
            init: Init::Zero,
        });
    };
    layer("glc.fc1", vec![gh, 2 * c], 2 * c, false);
    layer("glc.fc2", vec![c, gh], gh, false);
    for &kk in &config.attention_kernels {
        layer(&conv_name(kk), vec![1, 2, kk, kk], 2 * kk * kk, false);
    }
    // Zero mixer: branch weights start uniform.
    layer("hsa.mix", vec![config.branches(), c], c, true);
    layer("rgfc.mask", vec![k, c, 3, 3], 9 * c, false);
    layer("rgfc.fc1", vec![rh, k], k, false);
    layer("rgfc.fc2", vec![k, rh], rh, false);
    specs
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams {
    pub tensors: Vec<ParamTensor>,
}

impl PipelineParams {
    /// He-uniform weights and zero biases, drawn from `config.seed`.
    pub fn init(config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = layout(config)
            .into_iter()
            .map(|spec| {
                let n = spec.numel();
                let data = match spec.init {
                    Init::Zero => vec![0.0; n],
                    Init::HeUniform { fan_in } => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                    }
                };
                ParamTensor {
                    name: spec.name,
                    shape: spec.shape,
                    data,
                }
            })
            .collect();
        Ok(PipelineParams { tensors })
    }

    /// Every tensor set to zero.
    pub fn zeros(config: &PipelineConfig) -> Self {
        let tensors = layout(config)
            .into_iter()
            .map(|s| ParamTensor {
                data: vec![0.0; s.numel()],
                name: s.name,
                shape: s.shape,
            })
            .collect();
        PipelineParams { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&ParamTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamTensor> {
        self.tensors
            .iter_mut()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn data(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.get(name)?.data)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Checks names, order-independent presence and shapes against `config`.
    pub fn check(&self, config: &PipelineConfig) -> Result<()> {
        let specs = layout(config);
        for t in &self.tensors {
            let spec = specs
                .iter()
                .find(|s| s.name == t.name)
                .ok_or_else(|| Error::UnknownTensor(t.name.clone()))?;
            if spec.shape != t.shape || t.data.len() != spec.numel() {
                return Err(Error::ShapeMismatch {
                    name: t.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape.clone(),
                });
            }
        }
        for s in &specs {
            self.get(&s.name)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> std::result::Result<(), String> {
        match self.tensors.iter().find(|t| t.data.iter().any(|v| !v.is_finite())) {
            Some(t) => Err(t.name.clone()),
            None => Ok(()),
        }
    }

    /// Rounds every value through `f32`, as a save/load cycle would.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
        out
    }

    /// SHA-256 of the serialized container, hex encoded.
    pub fn checksum(&self) -> String {
        hex(&Sha256::digest(save_params(self)))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialized size of a container holding `specs`.
pub fn container_len(specs: &[TensorSpec]) -> usize {
    10 + specs
        .iter()
        .map(|s| 2 + s.name.len() + 1 + 4 * s.shape.len() + 4 * s.numel())
        .sum::<usize>()
}

pub fn save_params(params: &PipelineParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&TAIP_MAGIC);
    out.extend_from_slice(&TAIP_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for t in &params.tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a TAIP container and validates it against `config`. Each tensor
/// header is checked before its payload is read.
pub fn load_params(bytes: &[u8], config: &PipelineConfig) -> Result<PipelineParams> {
    let specs = layout(config);
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != TAIP_MAGIC {
        return Err(Error::BadMagic {
            expected: TAIP_MAGIC,
            found: magic.try_into().expect("four bytes"),
        });
    }
    let version = r.u16()?;
    if version != TAIP_VERSION {
        return Err(Error::BadVersion {
            expected: TAIP_VERSION,
            found: version,
        });
    }
    let count = r.u32()? as usize;
    let mut seen = BTreeSet::new();
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(at + 2, "tensor name is not UTF-8"))?
            .to_string();
        let spec = specs
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownTensor(name.clone()))?;
        if !seen.insert(name.clone()) {
            return Err(Error::format(at, format!("duplicate tensor {name:?}")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != spec.shape {
            return Err(Error::ShapeMismatch {
                name,
                expected: spec.shape.clone(),
                found: shape,
            });
        }
        let raw = r.take(4 * spec.numel())?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        tensors.push(ParamTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if let Some(missing) = specs.iter().find(|s| !seen.contains(&s.name)) {
        return Err(Error::MissingTensor(missing.name.clone()));
    }
    Ok(PipelineParams { tensors })
}
