//! Binary tensor container used for checkpoints and uncertainty bundles.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of JSON
//! header, then the tensors as contiguous little-endian `f32` arrays at the
//! byte offsets listed in the header (relative to the end of the header).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "markerq-f32-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Header metadata plus named tensors. Values pass through `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Container {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let bytes = t.len() * 4;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                bytes,
            });
            offset += bytes;
        }
        let header = serde_json::to_vec(&Header {
            format: FORMAT_TAG.into(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (name, t) in &self.tensors {
            for &v in t.data() {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(Error::NonFinite(format!("tensor {name} in f32")));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |why: &str| Error::format(origin, why.to_string());
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let start = 8usize
            .checked_add(n)
            .filter(|&s| s <= bytes.len())
            .ok_or_else(|| bad("header runs past end of file"))?;
        let header: Header = serde_json::from_slice(&bytes[8..start])
            .map_err(|e| Error::format(origin, format!("header: {e}")))?;
        if header.format != FORMAT_TAG {
            return Err(bad("unknown format tag"));
        }
        let data = &bytes[start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let count: usize = e.shape.iter().product();
            if e.bytes != count * 4 || e.offset + e.bytes > data.len() {
                return Err(bad(&format!("tensor {} out of bounds", e.name)));
            }
            let values = data[e.offset..e.offset + e.bytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, values)?));
        }
        Ok(Container {
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::MissingInput {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::decode(&bytes, path)
    }
}

/// Rounds every value to the nearest `f32`, as a checkpoint round-trip would.
pub fn round_to_f32(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}
