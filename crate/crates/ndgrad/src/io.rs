//! Weight files: `u64` little-endian header length, a UTF-8 JSON header listing
//! `{name, shape, offset}` in store order, then the raw little-endian payload.
//! Offsets are in bytes from the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ParamStore, Scalar, Tensor};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn encode_params<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        tensors.push(Entry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset });
        offset += p.value.len() * T::WIDTH;
    }
    let header = serde_json::to_vec(&Header { dtype: T::DTYPE.to_string(), tensors })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in store.iter() {
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn decode_params<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Format("missing header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes
        .get(8..8 + header_len)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Format(format!("dtype {} but expected {}", header.dtype, T::DTYPE)));
    }
    let payload = &bytes[8 + header_len..];
    let mut store = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let chunk = payload
            .get(e.offset..e.offset + n * T::WIDTH)
            .ok_or_else(|| Error::Format(format!("payload of `{}` out of range", e.name)))?;
        let data = chunk.chunks_exact(T::WIDTH).map(T::read_le).collect();
        store.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok(store)
}

pub fn save_params<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_params(store)?)?;
    Ok(())
}

pub fn load_params<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    decode_params(&fs::read(path)?)
}

/// Copies values from `source` into `target`, requiring identical names and shapes.
pub fn assign_params<T: Scalar>(target: &mut ParamStore<T>, source: &ParamStore<T>) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::Format(format!("{} tensors in file, model has {}", source.len(), target.len())));
    }
    for (_, p) in source.iter() {
        let id = target.id(&p.name)?;
        let slot = target.get_mut(id);
        if slot.value.shape() != p.value.shape() {
            return Err(Error::Format(format!(
                "`{}` is {:?} in file, {:?} in model",
                p.name,
                p.value.shape(),
                slot.value.shape()
            )));
        }
        slot.value = p.value.clone();
    }
    Ok(())
}
