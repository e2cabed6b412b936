//! Checkpoint file: magic, little-endian `u64` header length, JSON header,
//! then every tensor as raw little-endian `f32` in header order.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"TRIDIFF1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    pub variant: String,
    pub num_timesteps: usize,
}

impl ScheduleInfo {
    pub fn cosine(num_timesteps: usize) -> Self {
        Self {
            variant: "cosine".into(),
            num_timesteps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the tensor data.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Full resolved run configuration.
    pub config: serde_json::Value,
    pub step: u64,
    pub schedule: ScheduleInfo,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    config: serde_json::Value,
    step: u64,
    schedule: ScheduleInfo,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(store.entries().len());
    let mut data: Vec<u8> = Vec::new();
    for (name, var) in store.entries() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: var.dims().to_vec(),
            offset: data.len(),
        });
        let values = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        config,
        step,
        schedule,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e))?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<StoredTensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..data_start]).map_err(|e| Error::format(path, e))?;
    let data = &bytes[data_start..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * n;
        if end > data.len() {
            return Err(Error::format(path, format!("tensor {} extends past end of file", entry.name)));
        }
        let values = data[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(StoredTensor {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            values,
        });
    }
    Ok((header, tensors))
}

/// Copies stored tensors into `store`. Every parameter must be present with
/// the same shape and no unknown tensor may appear.
pub fn restore_parameters(store: &ParamStore, tensors: &[StoredTensor]) -> Result<()> {
    if tensors.len() != store.entries().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            tensors.len(),
            store.entries().len()
        )));
    }
    for t in tensors {
        let var = store
            .get(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", t.name)))?;
        if var.dims() != t.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {}: checkpoint shape {:?}, model shape {:?}",
                t.name,
                t.shape,
                var.dims()
            )));
        }
        let value = Tensor::from_vec(t.values.clone(), t.shape.as_slice(), &Device::Cpu)?;
        store.assign(&t.name, &value)?;
    }
    Ok(())
}
