//! Self-describing binary checkpoints.
//!
//! Layout: 8-byte magic `ADPFCKPT`, little-endian `u32` format version,
//! `u32` header length, a JSON header, then every tensor as little-endian
//! `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use adaperf_autograd::{ParamKind, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ADPFCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    /// Hash binding the weights to the configuration that produced them.
    hash: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub hash: String,
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }
}

pub fn save(path: &Path, kind: &str, hash: &str, meta: &impl Serialize, params: &ParamStore) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        hash: hash.to_string(),
        meta: serde_json::to_value(meta)?,
        tensors: params
            .entries()
            .map(|(name, kind, t)| TensorEntry {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + header_bytes.len() + 4 * params.entries().map(|(_, _, t)| t.len()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, _, t) in params.entries() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let corrupt = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(&format!("header: {e}")))?;
    let mut offset = 16 + hlen;
    let mut params = ParamStore::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| corrupt(&format!("truncated tensor {}", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 4 * n;
        params.add(entry.name, entry.kind, Tensor::new(&entry.shape, data)?);
    }
    if offset != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Checkpoint {
        kind: header.kind,
        hash: header.hash,
        meta: header.meta,
        params,
    })
}

/// Loads a checkpoint and checks its kind.
pub fn load_kind(path: &Path, kind: &str) -> Result<Checkpoint> {
    let ck = load(path)?;
    if ck.kind != kind {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("expected a {kind} checkpoint, found {}", ck.kind),
        });
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let mut store = ParamStore::new();
        store.weight("a", Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap());
        store.buffer("b", Tensor::from_slice(&[7.0]));
        save(&path, "test", "abc", &serde_json::json!({"k": 1}), &store).unwrap();
        let ck = load_kind(&path, "test").unwrap();
        assert!(ck.params.bit_eq(&store));
        assert_eq!(ck.params.kind(ck.params.id("b").unwrap()), ParamKind::Buffer);
        assert_eq!(ck.hash, "abc");
        assert!(load_kind(&path, "other").is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let mut store = ParamStore::new();
        store.weight("a", Tensor::zeros(&[8]));
        save(&path, "test", "h", &(), &store).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint { .. })));
        assert!(matches!(load(&dir.path().join("nope")), Err(Error::MissingArtifact(_))));
    }
}
