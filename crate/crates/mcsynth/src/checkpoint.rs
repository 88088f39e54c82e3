//! Checkpoint container: magic bytes, a JSON header describing the payload
//! and its tensor directory, then raw f32 little-endian blobs. Writing the
//! same state twice produces identical bytes, so resume tests can compare
//! files directly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::nn::params::ParamStore;
use crate::nn::Scalar;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MCSYNCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f32 elements from the start of the blob section.
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Payload kind tag, e.g. "generator" or "train_state".
    pub kind: String,
    /// Caller-defined metadata (config, step counters, rng position, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `tensors` in order after the header. Tensor names must be unique.
pub fn save(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(String, ArrayD<f32>)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, arr) in tensors {
        if entries.iter().any(|e: &TensorEntry| e.name == *name) {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        let len = arr.len() as u64;
        entries.push(TensorEntry { name: name.clone(), shape: arr.shape().to_vec(), offset, len });
        offset += len;
    }
    let header = CheckpointHeader { kind: kind.to_string(), meta, tensors: entries };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
    w.write_all(&header_bytes)?;
    for (_, arr) in tensors {
        let standard = arr.as_standard_layout();
        for v in standard.iter() {
            w.write_f32::<LittleEndian>(*v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by `save`.
pub fn load(path: &Path) -> Result<(CheckpointHeader, Vec<(String, ArrayD<f32>)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Format("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| Error::Format("missing version".into()))?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let header_len = r
        .read_u64::<LittleEndian>()
        .map_err(|_| Error::Format("missing header length".into()))? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|_| Error::Format("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let expect: usize = e.shape.iter().product();
        if expect as u64 != e.len {
            return Err(Error::Format(format!("tensor {} length does not match shape", e.name)));
        }
        let mut buf = vec![0f32; expect];
        r.read_f32_into::<LittleEndian>(&mut buf)
            .map_err(|_| Error::Format(format!("truncated data for tensor {}", e.name)))?;
        let arr = ArrayD::from_shape_vec(e.shape.clone(), buf)
            .map_err(|e2| Error::Format(format!("bad tensor shape: {e2}")))?;
        tensors.push((e.name.clone(), arr));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    Ok((header, tensors))
}

/// Snapshot of every parameter as f32, in registration order.
pub fn params_to_tensors<F: Scalar>(store: &ParamStore<F>) -> Vec<(String, ArrayD<f32>)> {
    store
        .iter()
        .map(|(name, arr)| (name.to_string(), arr.mapv(|v| v.as_f64() as f32)))
        .collect()
}

/// Restores parameters by name; every parameter in the store must be present
/// with a matching shape. Extra tensors are ignored.
pub fn tensors_into_params<F: Scalar>(
    tensors: &[(String, ArrayD<f32>)],
    store: &mut ParamStore<F>,
) -> Result<()> {
    for pid in store.ids().collect::<Vec<_>>() {
        let name = store.name(pid).to_string();
        let found = tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        if found.1.shape() != store.value(pid).shape() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name}: {:?} vs {:?}",
                found.1.shape(),
                store.value(pid).shape()
            )));
        }
        store.value_mut(pid).assign(&found.1.mapv(|v| F::from_f64(v as f64)));
    }
    Ok(())
}
