//! Single-file tensor container: a versioned JSON manifest followed by raw
//! little-endian `f64` blobs.
//!
//! Layout:
//!
//! ```text
//! b"IMPRARCH" | u64 LE manifest length | manifest JSON | tensor bytes ...
//! ```
//!
//! The manifest lists every tensor's name, shape and byte offset into the
//! blob section. Serialization is a pure function of the contents, so
//! save → load → save is byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IMPRARCH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus a JSON metadata object.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self { kind: kind.into(), meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((name.into(), shape.to_vec(), data));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Format(format!("archive `{}` has no tensor `{name}`", self.kind)))
    }

    /// Fetches a tensor and checks its shape.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let (s, d) = self.get(name)?;
        if s != shape {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {s:?}, expected {shape:?}"
            )));
        }
        Ok(d)
    }

    /// SHA-256 over every tensor's name, shape and bytes (metadata excluded).
    pub fn payload_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, shape, data) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((shape.len() as u64).to_le_bytes());
            for &d in shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, shape, data)| {
                let len = (data.len() * 8) as u64;
                let e = TensorEntry { name: name.clone(), shape: shape.clone(), offset, len };
                offset += len;
                e
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("bad archive magic".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(mlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..body])?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported archive version {}",
                manifest.format_version
            )));
        }
        let blob = &bytes[body..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let (start, len) = (e.offset as usize, e.len as usize);
            let expected = e.shape.iter().product::<usize>() * 8;
            if len != expected || start + len > blob.len() {
                return Err(Error::Format(format!("tensor `{}` out of bounds", e.name)));
            }
            let data = blob[start..start + len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, e.shape, data));
        }
        Ok(Self { kind: manifest.kind, meta: manifest.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and checks the archive kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let a = Self::load(path)?;
        if a.kind != kind {
            return Err(Error::Format(format!("expected `{kind}` archive, found `{}`", a.kind)));
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_byte_stable() {
        let mut a = Archive::new("test", serde_json::json!({"acc": 0.1 + 0.2, "seed": 7}));
        a.push("w", &[2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.1, 1e300]);
        a.push("b", &[0], vec![]);
        let bytes = a.to_bytes().unwrap();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(bytes, b.to_bytes().unwrap());
        assert_eq!(a.payload_digest(), b.payload_digest());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Archive::from_bytes(b"nope").is_err());
        let mut bytes = Archive::new("x", serde_json::Value::Null).to_bytes().unwrap();
        bytes[0] = b'J';
        assert!(Archive::from_bytes(&bytes).is_err());
    }

    #[test]
    fn shape_checked_access() {
        let mut a = Archive::new("t", serde_json::Value::Null);
        a.push("v", &[3], vec![1.0, 2.0, 3.0]);
        assert!(a.get_shaped("v", &[3]).is_ok());
        assert!(a.get_shaped("v", &[1, 3]).is_err());
        assert!(a.get("missing").is_err());
    }
}
