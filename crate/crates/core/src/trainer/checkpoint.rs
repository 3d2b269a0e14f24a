//! Binary checkpoint: `GSHD` magic, version, tensor table, trailing CRC32.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError};
use crate::nn::{DenseArray, ParamSet};
use crate::toyworld::GridConfig;

pub const MAGIC: &[u8; 4] = b"GSHD";
pub const FORMAT_VERSION: u32 = 1;
pub const EMA_PREFIX: &str = "ema.";
/// Rank-1 tensor holding the integer model hyperparameters.
pub const CONFIG_TENSOR: &str = "meta.config";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("invalid tensor {name}: {message}")]
    BadTensor { name: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Live parameters and their moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub ema: ParamSet,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model, CheckpointError> {
        Ok(Model::from_params(self.config, self.params.clone())?)
    }

    pub fn ema_model(&self) -> Result<Model, CheckpointError> {
        Ok(Model::from_params(self.config, self.ema.clone())?)
    }
}

fn config_values(c: &ModelConfig) -> Vec<f64> {
    [
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.vocab_size,
        c.grid.channels,
        c.grid.height,
        c.grid.width,
        c.max_positions,
        c.time_dim,
    ]
    .iter()
    .map(|&v| v as f64)
    .collect()
}

fn config_from(values: &[f64]) -> Result<ModelConfig, CheckpointError> {
    let bad = |message: &str| CheckpointError::BadTensor {
        name: CONFIG_TENSOR.into(),
        message: message.into(),
    };
    if values.len() != 9 || values.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
        return Err(bad("expected nine non-negative integers"));
    }
    let v: Vec<usize> = values.iter().map(|&x| x as usize).collect();
    Ok(ModelConfig {
        d_model: v[0],
        n_layers: v[1],
        n_heads: v[2],
        vocab_size: v[3],
        grid: GridConfig {
            channels: v[4],
            height: v[5],
            width: v[6],
        },
        max_positions: v[7],
        time_dim: v[8],
    })
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &DenseArray) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let count = 1 + ckpt.params.len() + ckpt.ema.len();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    let cfg = config_values(&ckpt.config);
    let n = cfg.len();
    write_tensor(
        &mut out,
        CONFIG_TENSOR,
        &DenseArray::new(vec![n], cfg).expect("non-empty"),
    );
    for (name, t) in ckpt.params.iter() {
        write_tensor(&mut out, name, t);
    }
    for (name, t) in ckpt.ema.iter() {
        write_tensor(&mut out, &format!("{EMA_PREFIX}{name}"), t);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated);
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    let mut r = Reader { buf: payload, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let count = r.u32()? as usize;
    let mut config = None;
    let mut params = ParamSet::new();
    let mut ema = ParamSet::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = DenseArray::new(shape, data).map_err(|e| CheckpointError::BadTensor {
            name: name.clone(),
            message: e.to_string(),
        })?;
        if name == CONFIG_TENSOR {
            config = Some(config_from(t.data())?);
        } else if let Some(base) = name.strip_prefix(EMA_PREFIX) {
            ema.push(base, t);
        } else {
            params.push(name, t);
        }
    }
    if r.pos != payload.len() {
        return Err(CheckpointError::BadTensor {
            name: "<trailer>".into(),
            message: "unexpected bytes after the last tensor".into(),
        });
    }
    let config = config.ok_or_else(|| CheckpointError::MissingTensor(CONFIG_TENSOR.into()))?;
    let params = reorder(&Model::layout_names(&config), params, "")?;
    let ema = reorder(&Model::layout_names(&config), ema, EMA_PREFIX)?;
    Model::from_params(config, params.clone())?;
    Model::from_params(config, ema.clone())?;
    Ok(Checkpoint { config, params, ema })
}

fn reorder(names: &[String], found: ParamSet, prefix: &str) -> Result<ParamSet, CheckpointError> {
    let mut out = ParamSet::new();
    for name in names {
        let id = found
            .find(name)
            .map_err(|_| CheckpointError::MissingTensor(format!("{prefix}{name}")))?;
        out.push(name.clone(), found.get(id).clone());
    }
    Ok(out)
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, encode(ckpt)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
