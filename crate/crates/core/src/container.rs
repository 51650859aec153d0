//! Directory container of named f64 arrays: `manifest.json` describing every
//! entry plus a little-endian `data.bin` blob. Used for datasets, feature
//! stores and checkpoints.

use std::path::Path;

use diffcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "data.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryInfo {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    entries: Vec<EntryInfo>,
}

/// Ordered named tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn push_array(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        let t = Tensor::new(shape, data).map_err(|e| Error::Container {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        self.push(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Container {
                name: name.to_string(),
                reason: "missing entry".into(),
            })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut blob = Vec::new();
        let mut infos = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let start = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            infos.push(EntryInfo {
                name: name.clone(),
                dtype: "f64".into(),
                shape: t.shape().to_vec(),
                offset: start as u64,
                length: (blob.len() - start) as u64,
                crc32: crc32fast::hash(&blob[start..]),
            });
        }
        let manifest = Manifest {
            meta: self.meta.clone(),
            entries: infos,
        };
        let blob_path = dir.join(BLOB);
        std::fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
        let man_path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&man_path, text).map_err(io_err(&man_path))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let man_path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&man_path).map_err(io_err(&man_path))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let blob_path = dir.join(BLOB);
        let blob = std::fs::read(&blob_path).map_err(io_err(&blob_path))?;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for e in manifest.entries {
            if e.dtype != "f64" {
                return Err(Error::Container {
                    name: e.name,
                    reason: format!("unsupported dtype {}", e.dtype),
                });
            }
            let count: usize = e.shape.iter().product();
            if (count * 8) as u64 != e.length {
                return Err(Error::Shape {
                    what: e.name,
                    expected: e.shape,
                    actual: vec![(e.length / 8) as usize],
                });
            }
            let (start, end) = (e.offset as usize, (e.offset + e.length) as usize);
            if end > blob.len() {
                return Err(Error::Checksum(e.name));
            }
            let bytes = &blob[start..end];
            if crc32fast::hash(bytes) != e.crc32 {
                return Err(Error::Checksum(e.name));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(e.shape, data)?;
            entries.push((e.name, t));
        }
        Ok(Self {
            meta: manifest.meta,
            entries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(serde_json::json!({"kind": "test"}));
        c.push_array("a", vec![2, 3], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.1, 7.0]).unwrap();
        c.push_array("b", vec![4], vec![0.0, 1.0 / 3.0, -0.0, 1e300]).unwrap();
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        c.write(dir.path()).unwrap();
        let back = Container::read(dir.path()).unwrap();
        assert_eq!(back.meta, c.meta);
        for ((n1, t1), (n2, t2)) in c.entries().zip(back.entries()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn truncated_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        sample().write(dir.path()).unwrap();
        let path = dir.path().join(BLOB);
        let blob = std::fs::read(&path).unwrap();
        std::fs::write(&path, &blob[..blob.len() - 4]).unwrap();
        match Container::read(dir.path()) {
            Err(Error::Checksum(name)) => assert_eq!(name, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        sample().write(dir.path()).unwrap();
        let path = dir.path().join(BLOB);
        let mut blob = std::fs::read(&path).unwrap();
        blob[3] ^= 0x10;
        std::fs::write(&path, &blob).unwrap();
        assert!(matches!(Container::read(dir.path()), Err(Error::Checksum(n)) if n == "a"));
    }

    #[test]
    fn edited_dims_name_the_entry() {
        let dir = tempfile::tempdir().unwrap();
        sample().write(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        m["entries"][0]["shape"] = serde_json::json!([3, 3]);
        std::fs::write(&path, m.to_string()).unwrap();
        match Container::read(dir.path()) {
            Err(Error::Shape { what, .. }) => assert_eq!(what, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
