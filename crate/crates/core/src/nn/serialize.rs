//! Flat tensor container.
//!
//! Layout: the 8-byte magic `EGTENSOR`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor's values back to back as
//! little-endian `f32`. The manifest carries a caller-defined header plus
//! one `(name, shape, offset)` record per tensor, offsets counted in bytes
//! from the start of the value block.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EGTENSOR";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest<H> {
    header: H,
    tensors: Vec<TensorEntry>,
    payload_bytes: u64,
}

pub fn write_tensors<H: Serialize>(header: &H, tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest {
        header,
        tensors: entries,
        payload_bytes: offset,
    })?;
    let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_tensors<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<(String, Tensor<f32>)>)> {
    let bad = |offset: usize, reason: &str| Error::Format {
        what: "tensor file",
        offset: offset as u64,
        reason: reason.to_owned(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad(0, "missing EGTENSOR magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize
        .checked_add(len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad(8, "manifest length exceeds file"))?;
    let manifest: Manifest<H> = serde_json::from_slice(&bytes[16..body])?;
    let payload = &bytes[body..];
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(bad(
            body,
            &format!("expected {} value bytes, found {}", manifest.payload_bytes, payload.len()),
        ));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(bad(body + start, &format!("tensor {} runs past end", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((e.name, Tensor::new(&e.shape, data)?));
    }
    Ok((manifest.header, out))
}
