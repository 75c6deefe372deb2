//! Single-file archives of named `f64` arrays with a JSON header.
//!
//! Layout: the 8-byte magic `BLGARCH1`, a little-endian `u64` header length,
//! the UTF-8 JSON header, then each array's values as little-endian `f64` in
//! header order. Writes go to a temporary sibling first and are renamed into
//! place, so an interrupted write never clobbers an existing archive.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, Shape, Tensor};

const MAGIC: &[u8; 8] = b"BLGARCH1";

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Shape,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub arrays: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, arrays: BTreeMap::new() }
    }

    /// Adds every array of `store` under `prefix`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.arrays.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Extracts the arrays under `prefix` (prefix stripped).
    pub fn take_store(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in &self.arrays {
            if let Some(rest) = name.strip_prefix(prefix) {
                store.insert(rest, t.clone());
            }
        }
        store
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            arrays: self.arrays.iter().map(|(n, t)| ArrayEntry { name: n.clone(), shape: t.shape() }).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload: usize = self.arrays.values().map(|t| t.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.arrays.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not an archive (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut cursor = 16 + hlen;
        let mut arrays = BTreeMap::new();
        for entry in header.arrays {
            let n = numel(&entry.shape);
            let raw = bytes.get(cursor..cursor + n * 8).ok_or_else(|| bad("truncated array data"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            cursor += n * 8;
            arrays.insert(entry.name, Tensor::new(entry.shape, data)?);
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after array data"));
        }
        Ok(Self { meta: header.meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let file_name = path.file_name().ok_or_else(|| Error::Checkpoint(format!("bad path {}", path.display())))?;
        let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::Checkpoint(format!("writing {}: {e}", path.display()))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut store = ParamStore::new();
        store.insert("a.weight", Tensor::new([1, 2, 1, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        store.insert("b", Tensor::scalar(std::f64::consts::PI));
        let mut ar = Archive::new(serde_json::json!({"kind": "test", "seed": 7}));
        ar.put_store("gen/", &store);
        let back = Archive::from_bytes(&ar.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta["seed"], 7);
        let restored = back.take_store("gen/");
        for ((_, a), (_, b)) in store.iter().zip(restored.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Archive::from_bytes(b"nonsense").is_err());
        let mut ar = Archive::new(serde_json::json!({}));
        ar.arrays.insert("x".into(), Tensor::zeros([1, 1, 2, 2]));
        let bytes = ar.to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn failed_write_keeps_previous_archive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.blg");
        let mut ar = Archive::new(serde_json::json!({"v": 1}));
        ar.save(&path).unwrap();
        let bad = dir.path().join("missing-dir").join("ck.blg");
        ar.meta = serde_json::json!({"v": 2});
        assert!(ar.save(&bad).is_err());
        assert_eq!(Archive::load(&path).unwrap().meta["v"], 1);
        assert!(!dir.path().join(".ck.blg.tmp").exists());
    }
}
