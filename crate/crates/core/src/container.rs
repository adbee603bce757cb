//! Directory container shared by every on-disk artifact.
//!
//! A container is a directory holding `header.json` plus one raw blob per
//! tensor. The header looks like
//!
//! ```json
//! {
//!   "format": "talkstyle-container",
//!   "version": 1,
//!   "kind": "motion_series",
//!   "meta": { "frames": 250, "fps": 25.0, "beta_dim": 64, "pose_dim": 7 },
//!   "blobs": [
//!     { "name": "beta", "file": "beta.f32", "dtype": "f32le", "shape": [250, 64] }
//!   ]
//! }
//! ```
//!
//! Blobs are row-major. `f32le` blobs are little-endian IEEE-754 binary32,
//! `i32le` blobs are little-endian two's complement 32-bit integers.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "talkstyle-container";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "header.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32le")]
    F32,
    #[serde(rename = "i32le")]
    I32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    meta: serde_json::Value,
    blobs: Vec<BlobEntry>,
}

#[derive(Debug, Clone)]
enum BlobData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

/// Builder for a container directory.
#[derive(Debug)]
pub struct ContainerWriter {
    kind: String,
    meta: serde_json::Value,
    blobs: Vec<(BlobEntry, BlobData)>,
}

impl ContainerWriter {
    pub fn new(kind: &str, meta: impl Serialize) -> Result<Self> {
        let meta = serde_json::to_value(meta)
            .map_err(|e| Error::Format(format!("cannot encode header meta: {e}")))?;
        Ok(Self {
            kind: kind.to_string(),
            meta,
            blobs: Vec::new(),
        })
    }

    pub fn f32(mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "blob `{name}`");
        self.blobs.push((
            BlobEntry {
                name: name.to_string(),
                file: format!("{name}.f32"),
                dtype: DType::F32,
                shape: shape.to_vec(),
            },
            BlobData::F32(data),
        ));
        self
    }

    pub fn f64_as_f32(self, name: &str, shape: &[usize], data: impl IntoIterator<Item = f64>) -> Self {
        let data = data.into_iter().map(|x| x as f32).collect();
        self.f32(name, shape, data)
    }

    pub fn i32(mut self, name: &str, shape: &[usize], data: Vec<i32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "blob `{name}`");
        self.blobs.push((
            BlobEntry {
                name: name.to_string(),
                file: format!("{name}.i32"),
                dtype: DType::I32,
                shape: shape.to_vec(),
            },
            BlobData::I32(data),
        ));
        self
    }

    pub fn write(self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.blobs.len());
        for (entry, data) in self.blobs {
            let bytes: Vec<u8> = match data {
                BlobData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                BlobData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            };
            let path = dir.join(&entry.file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            entries.push(entry);
        }
        let header = Header {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            kind: self.kind,
            meta: self.meta,
            blobs: entries,
        };
        let text = serde_json::to_string_pretty(&header)
            .map_err(|e| Error::Format(format!("cannot encode header: {e}")))?;
        let path = dir.join(HEADER_FILE);
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// A parsed container. Blob payloads are read lazily.
#[derive(Debug)]
pub struct Container {
    dir: std::path::PathBuf,
    header: Header,
}

impl Container {
    pub fn open(dir: &Path, expected_kind: &str) -> Result<Self> {
        let path = dir.join(HEADER_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: Header =
            serde_json::from_str(&text).map_err(|e| Error::parse(HEADER_FILE, e.to_string()))?;
        if header.format != FORMAT_TAG {
            return Err(Error::parse("format", format!("expected `{FORMAT_TAG}`, found `{}`", header.format)));
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::parse("version", format!("unsupported version {}", header.version)));
        }
        if header.kind != expected_kind {
            return Err(Error::parse(
                "kind",
                format!("expected `{expected_kind}`, found `{}`", header.kind),
            ));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            header,
        })
    }

    pub fn meta<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.header.meta.clone()).map_err(|e| Error::parse("meta", e.to_string()))
    }

    pub fn blob_names(&self) -> impl Iterator<Item = &str> {
        self.header.blobs.iter().map(|b| b.name.as_str())
    }

    fn entry(&self, name: &str, dtype: DType) -> Result<&BlobEntry> {
        let entry = self
            .header
            .blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::parse(name, "blob missing from header"))?;
        if entry.dtype != dtype {
            return Err(Error::parse(name, format!("expected dtype {dtype:?}, found {:?}", entry.dtype)));
        }
        Ok(entry)
    }

    fn raw(&self, entry: &BlobEntry) -> Result<Vec<u8>> {
        let path = self.dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = entry.shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(Error::parse(
                &entry.name,
                format!("expected {expected} bytes for shape {:?}, found {}", entry.shape, bytes.len()),
            ));
        }
        Ok(bytes)
    }

    /// Reads an f32 blob, returning its declared shape and row-major values.
    pub fn f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let entry = self.entry(name, DType::F32)?;
        let bytes = self.raw(entry)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((entry.shape.clone(), data))
    }

    pub fn i32(&self, name: &str) -> Result<(Vec<usize>, Vec<i32>)> {
        let entry = self.entry(name, DType::I32)?;
        let bytes = self.raw(entry)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((entry.shape.clone(), data))
    }

    /// Reads an f32 blob and checks its shape.
    pub fn f32_shaped(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let (found, data) = self.f32(name)?;
        if found != shape {
            return Err(Error::Dimension(format!("blob `{name}`: expected shape {shape:?}, found {found:?}")));
        }
        Ok(data)
    }
}

/// Writes a plain JSON document.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    serde_json::from_str(&text).map_err(|e| Error::parse(name, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        ContainerWriter::new("probe", serde_json::json!({}))
            .unwrap()
            .f32("a", &[2], vec![1.0, -2.5])
            .i32("b", &[1], vec![-3])
            .write(dir.path())
            .unwrap();
        let raw = fs::read(dir.path().join("a.f32")).unwrap();
        assert_eq!(raw, [1.0f32.to_le_bytes(), (-2.5f32).to_le_bytes()].concat());
        let c = Container::open(dir.path(), "probe").unwrap();
        assert_eq!(c.f32("a").unwrap(), (vec![2], vec![1.0, -2.5]));
        assert_eq!(c.i32("b").unwrap(), (vec![1], vec![-3]));
    }

    #[test]
    fn wrong_kind_and_truncation_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        ContainerWriter::new("probe", serde_json::json!({}))
            .unwrap()
            .f32("a", &[3], vec![1.0, 2.0, 3.0])
            .write(dir.path())
            .unwrap();
        assert!(matches!(Container::open(dir.path(), "other"), Err(Error::Parse { .. })));
        fs::write(dir.path().join("a.f32"), [0u8; 5]).unwrap();
        let c = Container::open(dir.path(), "probe").unwrap();
        match c.f32("a") {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
