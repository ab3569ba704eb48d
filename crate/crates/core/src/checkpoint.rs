//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `UCELLCKP`, a little-endian `u32` format
//! version, a `u64` header length, the JSON header (model config, parameter
//! names/shapes/trainable flags, free-form metadata), then every parameter
//! as little-endian `f64` in header order, followed by the EMA shadow in the
//! same order when the header says one is present.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Param};
use crate::tensor::Tensor;
use crate::training::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"UCELLCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ModelParams,
    pub ema: Option<Vec<Tensor>>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    lora_scale: f64,
    params: Vec<ParamHeader>,
    has_ema: bool,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, params: ModelParams) -> Self {
        Self { model, params, ema: None, meta: serde_json::Value::Null }
    }

    pub fn from_state(state: &TrainState, model: &ModelConfig, cfg: &TrainConfig) -> Self {
        Self {
            model: model.clone(),
            params: state.params.clone(),
            ema: Some(state.ema.clone()),
            meta: serde_json::json!({
                "step": state.step,
                "epoch": state.epoch,
                "skipped_steps": state.skipped_steps,
                "train": cfg,
            }),
        }
    }

    /// EMA weights when present, raw weights otherwise.
    pub fn inference_params(&self) -> ModelParams {
        let mut p = self.params.clone();
        if let Some(ema) = &self.ema {
            for (e, v) in p.entries_mut().iter_mut().zip(ema) {
                e.value = v.clone();
            }
        }
        p
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let header = Header {
            model: self.model.clone(),
            lora_scale: self.params.lora_scale,
            params: self
                .params
                .entries()
                .iter()
                .map(|p| ParamHeader { name: p.name.clone(), rows: p.value.rows, cols: p.value.cols, trainable: p.trainable })
                .collect(),
            has_ema: self.ema.is_some(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(json.len() as u64).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        let tensors = self.params.entries().iter().map(|p| &p.value).chain(self.ema.iter().flatten());
        for t in tensors {
            for &v in &t.data {
                w.write_f64::<LittleEndian>(v).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint (bad magic)", path.display())));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut read_tensor = |rows: usize, cols: usize| -> Result<Tensor> {
            let mut data = vec![0.0; rows * cols];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
            Ok(Tensor::from_vec(rows, cols, data))
        };
        let mut entries = Vec::with_capacity(header.params.len());
        for p in &header.params {
            entries.push(Param { name: p.name.clone(), value: read_tensor(p.rows, p.cols)?, trainable: p.trainable });
        }
        let ema = if header.has_ema {
            Some(header.params.iter().map(|p| read_tensor(p.rows, p.cols)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        header.model.validate()?;
        Ok(Self { model: header.model, params: ModelParams::from_entries(entries, header.lora_scale), ema, meta: header.meta })
    }
}
