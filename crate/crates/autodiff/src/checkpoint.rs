//! Weight checkpoint file.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      b"FICW"
//! version    u32            (currently 1)
//! precision  u32            (32 or 64)
//! header     u32 length + UTF-8 bytes (free-form, e.g. model config)
//! count      u32
//! count x {
//!   name     u32 length + UTF-8 bytes
//!   extents  4 x u64 (NCHW)
//!   payload  product(extents) values at `precision`
//! }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::AutodiffError;
use crate::scalar::{Precision, Real};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"FICW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub header: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

pub fn encode<T: Real>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::PRECISION.code().to_le_bytes());
    out.extend_from_slice(&(ckpt.header.len() as u32).to_le_bytes());
    out.extend_from_slice(ckpt.header.as_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AutodiffError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AutodiffError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, AutodiffError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, AutodiffError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, AutodiffError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| AutodiffError::Checkpoint("invalid UTF-8".into()))
    }
}

/// Precision recorded in an encoded checkpoint, without decoding payloads.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision, AutodiffError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let code = c.u32()?;
    Precision::from_code(code).ok_or_else(|| AutodiffError::Checkpoint(format!("unknown precision code {code}")))
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>, AutodiffError> {
    let precision = peek_precision(bytes)?;
    if precision != T::PRECISION {
        return Err(AutodiffError::Checkpoint(format!(
            "checkpoint holds {precision} values, requested {}",
            T::PRECISION
        )));
    }
    let mut c = Cursor { bytes, pos: 12 };
    let header = c.string()?;
    let count = c.u32()? as usize;
    let width = precision.bytes();
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = c.string()?;
        let mut shape = [0usize; 4];
        for e in shape.iter_mut() {
            *e = usize::try_from(c.u64()?).map_err(|_| AutodiffError::Checkpoint("extent overflow".into()))?;
        }
        let n = numel(&shape);
        let raw = c.take(n.checked_mul(width).ok_or_else(|| AutodiffError::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(width).map(T::read_le).collect();
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(AutodiffError::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(Checkpoint { header, tensors })
}

pub fn save<T: Real>(path: impl AsRef<Path>, ckpt: &Checkpoint<T>) -> Result<(), AutodiffError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode(ckpt))?;
    w.flush()?;
    Ok(())
}

pub fn read_bytes(path: impl AsRef<Path>) -> Result<Vec<u8>, AutodiffError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    Ok(bytes)
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>, AutodiffError> {
    decode(&read_bytes(path)?)
}
