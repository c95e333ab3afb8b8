//! Self-describing container for named arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SAECKPT1"
//! header_len u64
//! header     header_len bytes of UTF-8 JSON {"kind", "seed", "meta"}
//! count      u32
//! count × {
//!     name_len u32, name bytes,
//!     dtype    u8   (1 = f32, 2 = f64),
//!     ndim     u32, ndim × u64 dims,
//!     nbytes   u64, raw little-endian payload
//! }
//! ```
//!
//! Payloads are written verbatim, so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, Storage};

const MAGIC: &[u8; 8] = b"SAECKPT1";
const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub seed: u64,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub arrays: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, meta: serde_json::Value) -> Self {
        Checkpoint {
            header: Header {
                kind: kind.to_string(),
                seed,
                meta,
            },
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, array: Array) {
        self.arrays.push((name.into(), array));
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Load(format!("checkpoint has no array named {name:?}")))
    }

    /// Fetch an array and check its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<Array> {
        let a = self.get(name)?;
        if a.shape() != shape {
            return Err(Error::Load(format!(
                "{name}: checkpoint shape {:?} does not match expected {shape:?}",
                a.shape()
            )));
        }
        Ok(a.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match a.storage() {
                Storage::F32(_) => DTYPE_F32,
                Storage::F64(_) => DTYPE_F64,
            });
            out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let payload = a.storage().to_le_bytes();
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Load("not a checkpoint file (bad magic)".into()));
        }
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Load(format!("bad checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Load("array name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let nbytes = r.u64()? as usize;
            let payload = r.take(nbytes)?;
            let storage = match dtype {
                DTYPE_F32 => Storage::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                DTYPE_F64 => Storage::F64(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                other => return Err(Error::Load(format!("{name}: unknown dtype tag {other}"))),
            };
            let array = Array::new(shape, storage)
                .map_err(|e| Error::Load(format!("{name}: {e}")))?;
            arrays.push((name, array));
        }
        if r.pos != bytes.len() {
            return Err(Error::Load("trailing bytes after last array".into()));
        }
        Ok(Checkpoint { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn require_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Load(format!(
                "expected a {kind} checkpoint, found {}",
                self.header.kind
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Load("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
