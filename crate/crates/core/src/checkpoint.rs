//! Single-file archive of named matrices plus a JSON header.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      8 bytes  "XVCKPT\0\0"
//! version    u32      ARCHIVE_VERSION
//! header_len u64
//! header     header_len bytes of UTF-8 JSON
//! data       f64 values of every tensor, in header order, row-major
//! ```
//!
//! The header carries `format_version`, free-form `meta`, the tensor index and
//! a SHA-256 of the data section.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"XVCKPT\0\0";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: serde_json::Map<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
    data_sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn put_meta<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.meta.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("archive lacks {key:?}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn has_meta(&self, key: &str) -> bool {
        self.meta.contains_key(key)
    }

    pub fn tensor(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("archive lacks tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut index = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            index.push(TensorEntry {
                name: name.clone(),
                rows: t.nrows(),
                cols: t.ncols(),
            });
            for v in t.iter() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            format_version: ARCHIVE_VERSION,
            meta: self.meta.clone(),
            tensors: index,
            data_sha256: hex::encode(Sha256::digest(&data)),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + data.len());
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != ARCHIVE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != ARCHIVE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..data_start])?;
        let data = &bytes[data_start..];
        if hex::encode(Sha256::digest(data)) != header.data_sha256 {
            return Err(bad("data checksum mismatch"));
        }
        let mut tensors = BTreeMap::new();
        let mut off = 0usize;
        for e in header.tensors {
            let n = e.rows * e.cols;
            let end = off + n * 8;
            if end > data.len() {
                return Err(bad("truncated data"));
            }
            let vals: Vec<f64> = data[off..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(
                e.name,
                Array2::from_shape_vec((e.rows, e.cols), vals).map_err(|e| bad(&e.to_string()))?,
            );
            off = end;
        }
        Ok(Archive {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes)
    }
}
