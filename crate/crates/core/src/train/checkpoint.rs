//! `params.bin`: a little-endian dump of named tensors.
//!
//! ```text
//! magic   4 bytes  "ICPB"
//! version u32      1
//! count   u32      number of tensors
//! count × {
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims (rank × u64)
//!   data     product(dims) × f64
//! }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PARAMS_MAGIC: &[u8; 4] = b"ICPB";
pub const PARAMS_VERSION: u32 = 1;

pub fn encode_params(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.bytes.len() as u64, "truncated params file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != PARAMS_MAGIC {
        return Err(Error::format(0, "not a params file"));
    }
    let version = c.u32()?;
    if version != PARAMS_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = c.pos as u64;
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?;
        let rank = c.u32()?;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n.checked_mul(8).ok_or_else(|| Error::format(at, "tensor too large"))?)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after the last tensor"));
    }
    Ok(out)
}

pub fn write_params(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode_params(tensors))?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_params(&std::fs::read(path)?)
}
