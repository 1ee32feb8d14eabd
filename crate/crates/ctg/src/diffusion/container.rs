//! Binary container for checkpoints and dataset shards.
//!
//! Layout: 8-byte magic `CTGCKPT1`, a little-endian `u32` header length,
//! a JSON header, then a contiguous little-endian `f32` payload. The
//! header carries arbitrary metadata under `"meta"` and a tensor table
//! under `"tensors"`: `name -> {shape, dtype: "f32", offset}` with offsets
//! in bytes into the payload.

use serde_json::{json, Map, Value};
use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"CTGCKPT1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: not a container file")]
    BadMagic,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload truncated: tensor `{0}` extends past end of file")]
    Truncated(String),
}

/// Named f32 tensors plus free-form metadata.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Self { meta, tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor `{name}` shape mismatch");
        self.tensors.insert(name.to_string(), (shape.to_vec(), data));
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors.get(name).map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    /// Serialize to bytes. Tensors are laid out in sorted-name order, so
    /// the encoding is a pure function of the content.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut table = Map::new();
        let mut offset = 0usize;
        for (name, (shape, data)) in &self.tensors {
            table.insert(
                name.clone(),
                json!({ "shape": shape, "dtype": "f32", "offset": offset }),
            );
            offset += data.len() * 4;
        }
        let header = json!({ "meta": self.meta, "tensors": Value::Object(table) });
        let header_bytes = serde_json::to_vec(&header).expect("header serialization");

        let mut out = Vec::with_capacity(12 + header_bytes.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, (_, data)) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + header_len {
            return Err(ContainerError::Header("header extends past end of file".into()));
        }
        let header: Value = serde_json::from_slice(&bytes[12..12 + header_len])
            .map_err(|e| ContainerError::Header(e.to_string()))?;
        let payload = &bytes[12 + header_len..];

        let meta = header.get("meta").cloned().unwrap_or(Value::Null);
        let table = header
            .get("tensors")
            .and_then(Value::as_object)
            .ok_or_else(|| ContainerError::Header("missing tensor table".into()))?;

        let mut tensors = BTreeMap::new();
        for (name, entry) in table {
            let shape: Vec<usize> = entry
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| ContainerError::Header(format!("tensor `{name}` has no shape")))?
                .iter()
                .map(|v| v.as_u64().unwrap_or(0) as usize)
                .collect();
            let offset = entry.get("offset").and_then(Value::as_u64).unwrap_or(0) as usize;
            let count: usize = shape.iter().product();
            let end = offset + count * 4;
            if end > payload.len() {
                return Err(ContainerError::Truncated(name.clone()));
            }
            let mut data = Vec::with_capacity(count);
            for i in 0..count {
                let at = offset + i * 4;
                data.push(f32::from_le_bytes(payload[at..at + 4].try_into().unwrap()));
            }
            tensors.insert(name.clone(), (shape, data));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write_to(&self, path: &Path) -> Result<(), ContainerError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, ContainerError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Write via a temp file in the target directory followed by a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn roundtrip_is_byte_identical() {
        let mut c = Container::new(json!({ "kind": "test", "dt": 0.1 }));
        c.insert("b.second", &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        c.insert("a.first", &[4], vec![-1.0, 0.5, 0.25, 9.0]);
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.tensor("a.first").unwrap().1, &[-1.0, 0.5, 0.25, 9.0]);
        assert_eq!(back.meta["dt"], json!(0.1));
    }

    #[test]
    fn rejects_bad_magic() {
        let err = Container::from_bytes(b"NOTMAGIC....").unwrap_err();
        assert!(matches!(err, ContainerError::BadMagic));
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut c = Container::new(Value::Null);
        c.insert("t", &[8], vec![0.0; 8]);
        let mut bytes = c.to_bytes();
        bytes.truncate(bytes.len() - 4);
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, ContainerError::Truncated(_)));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.ctg");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
        assert!(!path.with_extension("tmp-write").exists());
    }
}
