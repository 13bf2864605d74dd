//! Versioned single-file archive of trained networks.
//!
//! Layout: the line `DUIIT-CKPT-1\n`, a little-endian `u64` header length,
//! a JSON header describing every network and tensor, then the raw
//! little-endian tensor data in header order.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Precision;
use crate::predictor::{Predictor, PredictorConfig};
use crate::translator::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ImageBuffer, TranslatorState,
};

pub const MAGIC: &str = "DUIIT-CKPT-1";

/// Everything needed to resume or deploy a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub method: String,
    pub step: u64,
    pub epoch: usize,
    pub predictor: Predictor,
    pub translator: Option<TranslatorState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    method: String,
    precision: Precision,
    step: u64,
    epoch: usize,
    predictor: Net<PredictorConfig>,
    translator: Option<TranslatorHeader>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Net<C> {
    prefix: String,
    config: C,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TranslatorHeader {
    g: Net<GeneratorConfig>,
    f: Net<GeneratorConfig>,
    d_source: Net<DiscriminatorConfig>,
    d_target: Net<DiscriminatorConfig>,
    lambda_cyc: f64,
    buffer_capacity_source: usize,
    buffer_capacity_target: usize,
    buffer_source: Vec<String>,
    buffer_target: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

fn elem_size(p: Precision) -> usize {
    match p {
        Precision::F32 => 4,
        Precision::F64 => 8,
    }
}

fn push_tensor(t: &Tensor, precision: Precision, out: &mut Vec<u8>) -> Result<()> {
    let flat = t.flatten_all()?.to_dtype(precision.dtype())?;
    match precision {
        Precision::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Precision::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(())
}

fn read_tensor(bytes: &[u8], shape: &[usize], precision: Precision) -> Result<Tensor> {
    let t = match precision {
        Precision::F32 => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Precision::F64 => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
    };
    Ok(t)
}

impl Checkpoint {
    pub fn precision(&self) -> Precision {
        self.predictor.precision()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let precision = self.precision();
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        let mut add_params = |params: &crate::nn::Params| {
            for (name, var) in params.iter() {
                tensors.push((name.to_string(), var.as_tensor().clone()));
            }
        };
        add_params(self.predictor.params());
        let translator = match &self.translator {
            None => None,
            Some(t) => {
                for p in [t.g.params(), t.f.params(), t.d_source.params(), t.d_target.params()] {
                    add_params(p);
                }
                let mut buffer = |side: &str, b: &ImageBuffer| {
                    b.images()
                        .iter()
                        .enumerate()
                        .map(|(i, img)| {
                            let name = format!("buffer.{side}.{i}");
                            tensors.push((name.clone(), img.clone()));
                            name
                        })
                        .collect::<Vec<_>>()
                };
                let buffer_source = buffer("source", &t.buffer_source);
                let buffer_target = buffer("target", &t.buffer_target);
                Some(TranslatorHeader {
                    g: Net { prefix: t.g.prefix().to_string(), config: t.g.config().clone() },
                    f: Net { prefix: t.f.prefix().to_string(), config: t.f.config().clone() },
                    d_source: Net { prefix: t.d_source.prefix().to_string(), config: t.d_source.config().clone() },
                    d_target: Net { prefix: t.d_target.prefix().to_string(), config: t.d_target.config().clone() },
                    lambda_cyc: t.lambda_cyc,
                    buffer_capacity_source: t.buffer_source.capacity(),
                    buffer_capacity_target: t.buffer_target.capacity(),
                    buffer_source,
                    buffer_target,
                })
            }
        };
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, t) in &tensors {
            push_tensor(t, precision, &mut data)?;
            entries.push(Entry { name: name.clone(), shape: t.dims().to_vec() });
        }
        let header = Header {
            format: MAGIC.to_string(),
            method: self.method.clone(),
            precision,
            step: self.step,
            epoch: self.epoch,
            predictor: Net { prefix: self.predictor.prefix().to_string(), config: self.predictor.config().clone() },
            translator,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 9 + json.len() + data.len());
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let rest = bytes
            .strip_prefix(MAGIC.as_bytes())
            .and_then(|r| r.strip_prefix(b"\n"))
            .ok_or_else(|| bad("missing DUIIT-CKPT-1 magic"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let rest = &rest[8..];
        if rest.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..len]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != MAGIC {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", header.format)));
        }
        let precision = header.precision;
        let mut data = &rest[len..];
        let mut map = HashMap::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n = e.shape.iter().product::<usize>() * elem_size(precision);
            if data.len() < n {
                return Err(Error::Checkpoint(format!("truncated data for `{}`", e.name)));
            }
            map.insert(e.name.clone(), read_tensor(&data[..n], &e.shape, precision)?);
            data = &data[n..];
        }
        if !data.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
        }
        let p = &header.predictor;
        let predictor = Predictor::from_tensors(p.config.clone(), &map, precision, &p.prefix)?;
        let translator = match header.translator {
            None => None,
            Some(t) => {
                let images = |names: &[String]| -> Result<Vec<Tensor>> {
                    names
                        .iter()
                        .map(|n| map.get(n).cloned().ok_or_else(|| Error::Checkpoint(format!("missing buffer image `{n}`"))))
                        .collect()
                };
                Some(TranslatorState {
                    g: Generator::from_tensors(t.g.config, &map, precision, &t.g.prefix)?,
                    f: Generator::from_tensors(t.f.config, &map, precision, &t.f.prefix)?,
                    d_source: Discriminator::from_tensors(t.d_source.config, &map, precision, &t.d_source.prefix)?,
                    d_target: Discriminator::from_tensors(t.d_target.config, &map, precision, &t.d_target.prefix)?,
                    buffer_source: ImageBuffer::from_images(t.buffer_capacity_source, images(&t.buffer_source)?)?,
                    buffer_target: ImageBuffer::from_images(t.buffer_capacity_target, images(&t.buffer_target)?)?,
                    lambda_cyc: t.lambda_cyc,
                })
            }
        };
        Ok(Self {
            method: header.method,
            step: header.step,
            epoch: header.epoch,
            predictor,
            translator,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
