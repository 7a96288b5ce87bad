//! Named-tensor container and its binary checkpoint format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "EXPW" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | u32 extents[rank] | f32 data
//! u32 CRC32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"EXPW";
pub const VERSION: u32 = 1;

/// Named tensors in lexicographic name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ModelWeights<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Real> ModelWeights<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor, rejecting duplicate names.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "tensor name length {} out of range",
                name.len()
            )));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate tensor name {name}"
            )));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::WeightsMismatch(format!("missing tensor {name}")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Tensors whose name starts with `prefix`.
    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor<T>)> {
        self.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Shallow copy of the tensors under `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .with_prefix(prefix)
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
        }
    }

    /// Moves every tensor of `other` into `self`, rejecting name clashes.
    pub fn merge(&mut self, other: ModelWeights<T>) -> Result<()> {
        for (k, v) in other.tensors {
            self.insert(k, v)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// CRC32 over names, shapes and data, used to assert that a half-step
    /// left a network untouched.
    pub fn fingerprint(&self) -> u32 {
        self.cast::<f32>().encode_unchecked().1
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.cast::<f32>().encode_unchecked().0
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }
}

impl ModelWeights<f32> {
    fn encode_unchecked(&self) -> (Vec<u8>, u32) {
        let mut buf = Vec::with_capacity(16 + self.parameter_count() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.rank() as u8);
            for &e in t.shape() {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        (buf, crc)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..bytes.len().min(4)]),
                std::str::from_utf8(MAGIC).unwrap_or_default()
            )));
        }
        let mut r = Reader { bytes, pos: 4 };
        let header = |r: &mut Reader| {
            r.u32().ok_or_else(|| Error::Truncated {
                name: "<header>".into(),
            })
        };
        let version = header(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = header(&mut r)?;
        let mut out = ModelWeights::new();
        let mut last = "<header>".to_string();
        for _ in 0..count {
            let truncated = |name: &str| Error::Truncated {
                name: name.to_string(),
            };
            let len = r.u16().ok_or_else(|| truncated(&format!("after {last}")))? as usize;
            let name = r
                .take(len)
                .ok_or_else(|| truncated(&format!("after {last}")))?;
            let name = std::str::from_utf8(name)
                .map_err(|_| Error::Format(format!("tensor name after {last} is not UTF-8")))?
                .to_string();
            let rank = r.u8().ok_or_else(|| truncated(&name))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().ok_or_else(|| truncated(&name))? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r
                .take(numel.checked_mul(4).ok_or_else(|| truncated(&name))?)
                .ok_or_else(|| truncated(&name))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(&shape, data)
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            out.insert(name.clone(), tensor)
                .map_err(|e| Error::Format(e.to_string()))?;
            last = name;
        }
        let body_end = r.pos;
        let stored = r.u32().ok_or_else(|| Error::Truncated {
            name: format!("checksum after {last}"),
        })?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checksum",
                bytes.len() - r.pos
            )));
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes through a sibling temporary file and renames it into place, so a
/// failed write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
