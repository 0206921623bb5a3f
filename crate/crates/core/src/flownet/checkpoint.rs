//! Versioned binary checkpoint.
//!
//! ```text
//! "WSAC"  u32 version
//! str     model config (TOML)
//! str     free-form metadata
//! u32     parameter count, then per parameter:
//!           str name, u32 rank, u64 dims[rank], u64 element offset
//! u64     total element count, f32 values[total]
//! u8      optimizer flag; when 1:
//!           u64 step, u64 epoch, f32 m[total], f32 v[total]
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8. All integers and
//! floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{put_f32s, put_string, put_u32, put_u64, read_file, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::model::model_specs;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WSAC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam moments and counters, laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub epoch: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: String,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState>,
}

fn flat(store: &ParamStore<f32>) -> Vec<f32> {
    store.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
}

fn unflatten(layout: &ParamStore<f32>, values: &[f32]) -> ParamStore<f32> {
    let mut at = 0;
    let map: BTreeMap<String, Tensor<f32>> = layout
        .iter()
        .map(|(k, t)| {
            let n = t.numel();
            let tensor = Tensor::from_parts(t.shape().to_vec(), values[at..at + n].to_vec());
            at += n;
            (k.clone(), tensor)
        })
        .collect();
    ParamStore::from_map(map)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = toml::to_string(&self.config)
            .map_err(|e| Error::Config(format!("cannot serialize model config: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_string(&mut out, &config);
        put_string(&mut out, &self.meta);
        put_u32(&mut out, self.params.len() as u32);
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            put_string(&mut out, name);
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_u64(&mut out, offset);
            offset += t.numel() as u64;
        }
        put_u64(&mut out, offset);
        put_f32s(&mut out, &flat(&self.params));
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                for (name, store) in [("m", &opt.m), ("v", &opt.v)] {
                    if store.len() != self.params.len()
                        || store.iter().zip(self.params.iter()).any(|(a, b)| {
                            a.0 != b.0 || a.1.shape() != b.1.shape()
                        })
                    {
                        return Err(Error::Argument(format!(
                            "optimizer {name} buffers do not match the parameters"
                        )));
                    }
                }
                out.push(1);
                put_u64(&mut out, opt.step);
                put_u64(&mut out, opt.epoch);
                put_f32s(&mut out, &flat(&opt.m));
                put_f32s(&mut out, &flat(&opt.v));
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let at = r.offset();
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
        }
        let at = r.offset();
        let config_text = r.string("model config")?;
        let config: ModelConfig = toml::from_str(&config_text)
            .map_err(|e| Error::format(at, format!("invalid model config: {e}")))?;
        let meta = r.string("metadata")?;
        let count = r.u32("parameter count")? as usize;
        let mut layout = BTreeMap::new();
        let mut expected_offset = 0u64;
        for _ in 0..count {
            let at = r.offset();
            let name = r.string("parameter name")?;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::format(at, format!("parameter {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u64("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let off_at = r.offset();
            let offset = r.u64("offset")?;
            if offset != expected_offset {
                return Err(Error::format(
                    off_at,
                    format!("parameter {name} at offset {offset}, expected {expected_offset}"),
                ));
            }
            let n: usize = shape.iter().product();
            expected_offset += n as u64;
            let placeholder = Tensor::from_parts(shape, vec![0.0f32; n]);
            if layout.insert(name.clone(), placeholder).is_some() {
                return Err(Error::format(at, format!("duplicate parameter {name}")));
            }
        }
        let at = r.offset();
        let total = r.u64("value count")?;
        if total != expected_offset {
            return Err(Error::format(
                at,
                format!("manifest covers {expected_offset} values, header says {total}"),
            ));
        }
        let layout = ParamStore::from_map(layout);
        let values = r.f32s(total as usize, "parameter values")?;
        let params = unflatten(&layout, &values);
        let at = r.offset();
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                let epoch = r.u64("optimizer epoch")?;
                let m = r.f32s(total as usize, "first moments")?;
                let v = r.f32s(total as usize, "second moments")?;
                Some(OptimizerState {
                    step,
                    epoch,
                    m: unflatten(&layout, &m),
                    v: unflatten(&layout, &v),
                })
            }
            f => return Err(Error::format(at, format!("bad optimizer flag {f}"))),
        };
        let end = r.offset();
        r.finish()?;
        let specs = model_specs(&config)
            .map_err(|e| Error::format(end, format!("stored config is unusable: {e}")))?;
        params
            .check_specs(&specs)
            .map_err(|e| Error::format(end, format!("parameters do not match config: {e}")))?;
        Ok(Self {
            config,
            meta,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
