//! Tensor container: magic, manifest length (u64 LE), JSON manifest, then the
//! raw little-endian payloads in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FSTRMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

/// Named f64 tensors plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let nbytes = (t.numel() * 8) as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let manifest = serde_json::to_vec(&Manifest {
            format_version: FORMAT_VERSION,
            tensors: entries,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("missing container magic".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("manifest runs past end of file".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..body])?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let payload = &bytes[body..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f64" {
                return Err(Error::Checkpoint(format!("{}: dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
            if e.nbytes as usize != numel * 8 || end > payload.len() {
                return Err(Error::Checkpoint(format!("{}: bad payload extent", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            metadata: manifest.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_exact_round_trip() {
        let mut c = Container::new(serde_json::json!({"step": 3, "note": "x"}));
        c.push("a", Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap());
        c.push("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.get("b").unwrap().data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            Container::from_bytes(b"not a checkpoint"),
            Err(Error::Checkpoint(_))
        ));
    }
}
