//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CAECKPT\0"
//! version    u32
//! header_len u64
//! header     JSON: { kind, fingerprint, meta, tensors: [{name, dtype, shape, offset, len}] }
//! payload    raw tensor bytes, offsets relative to the payload start
//! ```
//!
//! Tensors are stored in their own dtype, so a load reproduces them bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn;

pub const MAGIC: &[u8; 8] = b"CAECKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    fingerprint: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub fingerprint: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Hex SHA-256 of an architecture description.
pub fn fingerprint(architecture: &str) -> String {
    let digest = Sha256::digest(architecture.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

impl Checkpoint {
    pub fn new(kind: &str, fingerprint: String, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            fingerprint,
            meta,
            tensors: BTreeMap::new(),
        }
    }

    /// Adds every tensor of `map` under `prefix`.
    pub fn insert_all(&mut self, prefix: &str, map: BTreeMap<String, Tensor>) {
        for (k, v) in map {
            self.tensors.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn expect(&self, kind: &str, fingerprint: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::VersionMismatch {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        if self.fingerprint != fingerprint {
            return Err(Error::VersionMismatch {
                expected: fingerprint.to_string(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = nn::tensor_bytes(t)?;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: dtype_name(t.dtype())?.to_string(),
                shape: t.dims().to_vec(),
                offset: payload.len(),
                len: bytes.len(),
            });
            payload.extend_from_slice(&bytes);
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            fingerprint: self.fingerprint.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic or truncated)".into(),
            ));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = 20usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..payload_start])
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let end = e
                .offset
                .checked_add(e.len)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| Error::Checkpoint(format!("truncated payload for tensor {}", e.name)))?;
            let raw = &payload[e.offset..end];
            let count: usize = e.shape.iter().product();
            let t = match e.dtype.as_str() {
                "f32" if raw.len() == count * 4 => {
                    let v: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, e.shape.clone(), &Device::Cpu)?
                }
                "f64" if raw.len() == count * 8 => {
                    let v: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_vec(v, e.shape.clone(), &Device::Cpu)?
                }
                _ => return Err(Error::Checkpoint(format!("bad entry for tensor {}", e.name))),
            };
            tensors.insert(e.name, t);
        }
        Ok(Self {
            kind: header.kind,
            fingerprint: header.fingerprint,
            meta: header.meta,
            tensors,
        })
    }

    /// Write to a sibling temp file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("test", fingerprint("arch"), serde_json::json!({"step": 3}));
        c.tensors.insert(
            "a".into(),
            Tensor::new(&[1.5f32, -0.0, f32::MIN_POSITIVE], &Device::Cpu).unwrap(),
        );
        c.tensors.insert(
            "b".into(),
            Tensor::new(&[[1e-300f64, 2.0], [3.0, -4.0]], &Device::Cpu).unwrap(),
        );
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.meta["step"], 3);
        for (k, t) in &c.tensors {
            assert_eq!(
                nn::tensor_bytes(t).unwrap(),
                nn::tensor_bytes(&back.tensors[k]).unwrap()
            );
            assert_eq!(t.dims(), back.tensors[k].dims());
        }
    }

    #[test]
    fn truncation_and_version_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        let mut bumped = bytes.clone();
        bumped[8] = 99;
        assert!(matches!(
            Checkpoint::from_bytes(&bumped),
            Err(Error::VersionMismatch { .. })
        ));
    }

    #[test]
    fn fingerprint_mismatch_rejected() {
        let c = sample();
        assert!(c.expect("test", &fingerprint("arch")).is_ok());
        assert!(matches!(
            c.expect("test", &fingerprint("other")),
            Err(Error::VersionMismatch { .. })
        ));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested").join("m.ckpt");
        sample().save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.tensors.len(), 2);
        assert!(!path.with_extension("ckpt.tmp").exists());
    }
}
