//! Binary checkpoint format.
//!
//! ```text
//! "FFDC1"                     5-byte magic
//! u64 LE                      manifest length in bytes
//! manifest                    UTF-8 JSON: {"meta": {..}, "tensors": [{name, shape, offset}]}
//! f64 LE arrays               concatenated in manifest order; offsets are relative
//!                             to the first byte after the manifest
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor2D;
use super::NnError;

pub const MAGIC: &[u8; 5] = b"FFDC1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor2D)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: BTreeMap<String, String>) -> Self {
        let tensors = store.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        Self { meta, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: [t.rows(), t.cols()], offset });
            offset += 8 * t.data().len() as u64;
        }
        let manifest = Manifest { meta: self.meta.clone(), tensors: entries };
        let header = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(13 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let bad = |m: &str| NnError::Checkpoint(m.to_string());
        if bytes.len() < 13 || &bytes[..5] != MAGIC {
            return Err(bad("missing FFDC1 magic"));
        }
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let body_start = 13usize.checked_add(hlen).ok_or_else(|| bad("manifest length overflow"))?;
        if bytes.len() < body_start {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&bytes[13..body_start]).map_err(|e| NnError::Checkpoint(format!("manifest: {e}")))?;
        let body = &bytes[body_start..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > body.len() {
                return Err(NnError::Checkpoint(format!("tensor {} out of bounds", e.name)));
            }
            let data = body[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((e.name.clone(), Tensor2D::from_vec(e.shape[0], e.shape[1], data)));
        }
        Ok(Self { meta: manifest.meta, tensors })
    }

    /// Copy every tensor into `store` by name.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<(), NnError> {
        if self.tensors.len() != store.len() {
            return Err(NnError::Checkpoint(format!("checkpoint has {} tensors, model expects {}", self.tensors.len(), store.len())));
        }
        for (name, t) in &self.tensors {
            store.load_value(name, t.clone())?;
        }
        Ok(())
    }
}
