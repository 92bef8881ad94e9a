//! Binary checkpoints: an 8-byte little-endian header length, a JSON header,
//! then every parameter as contiguous little-endian `f32` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BaseModel, ModelConfig, ParamStore, TaskKind};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{Element, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub seed: u64,
    /// Free-form metadata, e.g. the adapter fusion spec.
    #[serde(default)]
    pub extra: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

/// A parsed checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    payload: Vec<u8>,
}

/// Writes the stores in order; parameter names are prefixed per store.
pub fn write_checkpoint<T: Element>(
    path: &Path,
    config: serde_json::Value,
    seed: u64,
    extra: serde_json::Value,
    stores: &[(&str, &ParamStore<T>)],
) -> Result<()> {
    let mut params = Vec::new();
    let mut payload = Vec::new();
    for (prefix, store) in stores {
        for (name, t) in store.iter() {
            params.push(ParamEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for &x in t.data() {
                payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config,
        seed,
        extra,
        params,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(8 + json.len() + payload.len());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::from(CheckpointError::CorruptHeader(m.to_string()));
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| corrupt("missing header length"))?;
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| corrupt("header length"))?;
        let json = bytes
            .get(8..8usize.saturating_add(header_len))
            .ok_or_else(|| corrupt("header length exceeds file"))?;
        let raw: serde_json::Value =
            serde_json::from_slice(json).map_err(|e| corrupt(&e.to_string()))?;
        let found = raw
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| corrupt("missing format_version"))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(CheckpointError::VersionMismatch {
                found: found as u32,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        let header: CheckpointHeader = serde_json::from_value(raw).map_err(|e| corrupt(&e.to_string()))?;
        let payload = bytes[8 + header_len..].to_vec();
        let needed = header
            .params
            .iter()
            .map(|p| p.offset + 4 * p.shape.iter().product::<usize>())
            .max()
            .unwrap_or(0);
        if payload.len() < needed {
            return Err(CheckpointError::Truncated {
                needed,
                found: payload.len(),
            }
            .into());
        }
        Ok(Checkpoint { header, payload })
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.header.params.iter().find(|p| p.name == name)
    }

    /// Reads one tensor by full name.
    pub fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entry(name)
            .ok_or_else(|| CheckpointError::MissingParameter(name.to_string()))?;
        let n: usize = e.shape.iter().product();
        let data = self.payload[e.offset..e.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| T::lit(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
            .collect();
        Tensor::new(&e.shape, data).map_err(|_| {
            CheckpointError::CorruptHeader(format!("zero-sized shape for {name}")).into()
        })
    }

    /// Fills every tensor of `store` from `prefix`-named entries, checking shapes.
    pub fn restore<T: Element>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        for (name, t) in store.iter_mut() {
            let full = format!("{prefix}{name}");
            let e = self
                .entry(&full)
                .ok_or_else(|| CheckpointError::MissingParameter(full.clone()))?;
            if e.shape != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: full,
                    found: e.shape.clone(),
                    expected: t.shape().to_vec(),
                }
                .into());
            }
            let loaded = self.tensor::<T>(&full)?;
            t.data_mut().copy_from_slice(loaded.data());
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeaderConfig {
    model: ModelConfig,
    task: TaskKind,
}

pub fn save_model(model: &BaseModel<f32>, path: &Path) -> Result<()> {
    let config = serde_json::to_value(ModelHeaderConfig {
        model: model.config().clone(),
        task: model.task(),
    })?;
    write_checkpoint(
        path,
        config,
        model.seed,
        serde_json::Value::Null,
        &[("encoder.", model.encoder.params()), ("head.", model.head.params())],
    )
}

pub fn load_model(path: &Path) -> Result<BaseModel<f32>> {
    let ckpt = read_checkpoint(path)?;
    let cfg: ModelHeaderConfig = serde_json::from_value(ckpt.header.config.clone())
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let mut model = BaseModel::new(&cfg.model, cfg.task, ckpt.header.seed)?;
    ckpt.restore("encoder.", model.encoder.params_mut())?;
    ckpt.restore("head.", model.head.params_mut())?;
    Ok(model)
}
