//! Binary tensor checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TSA1"  version:u32  tensor_count:u32
//! repeated tensor_count times:
//!     name_len:u32  name:[u8; name_len]  rank:u32  extents:[u32; rank]
//!     payload:[f64; product(extents)]
//! ```

use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Result, TsaError};

pub const MAGIC: &[u8; 4] = b"TSA1";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TsaError::format(
                "checkpoint",
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(TsaError::format("checkpoint", "bad magic bytes"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(TsaError::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| TsaError::format("checkpoint", format!("tensor {i} name is not UTF-8")))?;
        let rank = r.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&name)? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 8, &name)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(TsaError::format("checkpoint", "trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(tensors)).map_err(|e| TsaError::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| TsaError::io(path, e))?;
    decode(&bytes)
}
