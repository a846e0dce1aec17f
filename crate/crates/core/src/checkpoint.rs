//! Versioned container of named arrays plus a JSON metadata document.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "SPCUEARC"
//! version    u32       1
//! header_len u64
//! header     JSON      {"meta": {..}, "tensors": [{"name", "dtype", "shape", "offset", "length"}]}
//! data       bytes     raw little-endian arrays, offsets relative to the start of this section
//! ```
//!
//! `dtype` is `"f32"` or `"f64"`; readers convert on load. Readers accept any
//! file whose version is less than or equal to their own and ignore unknown
//! header keys.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::Module;
use crate::tensor::Scalar;
use crate::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"SPCUEARC";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
struct Stored {
    dtype: String,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, Stored>,
}

impl TensorArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert<T: Scalar>(&mut self, name: &str, shape: &[usize], values: &[T]) {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.insert(
            name.to_string(),
            Stored {
                dtype: T::DTYPE.to_string(),
                shape: shape.to_vec(),
                bytes: T::to_le_bytes_vec(values),
            },
        );
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Option<(&[usize], Vec<T>)> {
        let s = self.tensors.get(name)?;
        let values = match s.dtype.as_str() {
            "f32" => f32::from_le_bytes_slice(&s.bytes)
                .into_iter()
                .map(|v| T::from_f64(v as f64))
                .collect(),
            "f64" => f64::from_le_bytes_slice(&s.bytes)
                .into_iter()
                .map(T::from_f64)
                .collect(),
            _ => return None,
        };
        Some((&s.shape, values))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Stores every parameter and buffer of `module` under `prefix`.
    pub fn store_module<T: Scalar, M: Module<T> + ?Sized>(&mut self, prefix: &str, module: &mut M) {
        module.visit(prefix, &mut |name, p| self.insert(name, &p.shape, &p.value));
    }

    /// Loads every parameter of `module` from `prefix`; missing or
    /// mis-shaped entries are errors.
    pub fn load_module<T: Scalar, M: Module<T> + ?Sized>(
        &self,
        prefix: &str,
        module: &mut M,
        path: &Path,
    ) -> Result<()> {
        let mut problems = Vec::new();
        module.visit(prefix, &mut |name, p| match self.get::<T>(name) {
            Some((shape, values)) if shape == p.shape.as_slice() => p.value = values,
            Some((shape, _)) => problems.push(format!("{name}: shape {shape:?}, expected {:?}", p.shape)),
            None => problems.push(format!("missing tensor {name}")),
        });
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::checkpoint(path, problems.join("; ")))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, s) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                dtype: s.dtype.clone(),
                shape: s.shape.clone(),
                offset,
                length: s.bytes.len() as u64,
            });
            offset += s.bytes.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("header serialises");
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for s in self.tensors.values() {
            out.extend_from_slice(&s.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::checkpoint(path, m);
        if bytes.len() < 20 || &bytes[..8] != ARCHIVE_MAGIC {
            return Err(bad("not a spoofcue archive (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version > ARCHIVE_VERSION {
            return Err(Error::checkpoint(
                path,
                format!("archive version {version} is newer than supported {ARCHIVE_VERSION}"),
            ));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let data_start = 20usize
            .checked_add(hlen)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..data_start])
            .map_err(|e| Error::checkpoint(path, format!("bad header: {e}")))?;
        let data = &bytes[data_start..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(Error::checkpoint(path, format!("unsupported dtype {other}"))),
            };
            let (start, len) = (e.offset as usize, e.length as usize);
            if start.checked_add(len).is_none_or(|end| end > data.len())
                || len != e.shape.iter().product::<usize>() * width
            {
                return Err(Error::checkpoint(path, format!("tensor {} has inconsistent extent", e.name)));
            }
            tensors.insert(
                e.name,
                Stored {
                    dtype: e.dtype,
                    shape: e.shape,
                    bytes: data[start..start + len].to_vec(),
                },
            );
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
