//! Portable binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "VITVSCKP"
//! version      u32      currently 1
//! meta_len     u64      byte length of the metadata block
//! metadata     UTF-8    free-form `key = value` lines
//! entry_count  u32
//! entry_count times:
//!   name_len   u32
//!   name       UTF-8
//!   dtype      u8       1 = f32, 2 = f64
//!   ndim       u32
//!   dims       u64 * ndim
//!   offset     u64      start of this entry within the data section
//!   byte_len   u64      = product(dims) * dtype size
//! data section: raw little-endian elements, entries packed back to back
//! ```

use std::path::Path;

use super::{numel, DType, Real, Tensor};
use crate::error::{shape_err, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VITVSCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl CheckpointEntry {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decodes the stored elements, converting between precisions if needed.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match self.dtype {
            DType::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| T::lit(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => self
                .bytes
                .chunks_exact(8)
                .map(|c| T::lit(f64::read_le(c)))
                .collect(),
        };
        Tensor::new(&self.shape, data)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub entries: Vec<CheckpointEntry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated checkpoint at byte {}", self.pos))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self, n: usize) -> std::result::Result<String, String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

impl Checkpoint {
    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push(CheckpointEntry::from_tensor(name, t));
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .ok_or_else(|| shape_err!("checkpoint has no entry named {name:?}"))?
            .to_tensor()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.code());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(e.bytes.len() as u64).to_le_bytes());
            offset += e.bytes.len() as u64;
        }
        for e in &self.entries {
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err("not a checkpoint file (bad magic)".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let meta_len = r.u64()? as usize;
        let metadata = r.string(meta_len)?;
        let count = r.u32()? as usize;
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let dtype = DType::from_code(r.u8()?).ok_or("unknown dtype code")?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let offset = r.u64()? as usize;
            let byte_len = r.u64()? as usize;
            if numel(&shape).checked_mul(dtype.size()) != Some(byte_len) {
                return Err(format!("entry {name:?}: byte length does not match shape"));
            }
            headers.push((name, dtype, shape, offset, byte_len));
        }
        let data = &buf[r.pos..];
        let entries = headers
            .into_iter()
            .map(|(name, dtype, shape, offset, len)| {
                let bytes = offset
                    .checked_add(len)
                    .and_then(|end| data.get(offset..end))
                    .ok_or_else(|| format!("entry {name:?} points past the end of the file"))?
                    .to_vec();
                Ok(CheckpointEntry {
                    name,
                    dtype,
                    shape,
                    bytes,
                })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        Ok(Self { metadata, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|m| Error::format(path, m))
    }
}
