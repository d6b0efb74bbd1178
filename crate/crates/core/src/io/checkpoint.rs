//! `SPTN` parameter checkpoints.
//!
//! Layout, all little-endian: magic `SPTN`, version `u16`, tensor count
//! `u32`, then per tensor a `u16` path length and UTF-8 path, dtype `u8`
//! (1 = f32, 2 = f64), `ndim: u8`, `ndim` dims as `u32`, and the raw data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"SPTN";
pub const VERSION: u16 = 1;

/// Serialize every tensor of `params` in store order.
pub fn encode<T: Scalar>(params: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + params.numel() * std::mem::size_of::<T>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(params.len()).map_err(|_| Error::InvalidArgument("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("parameter path of {} bytes is too long", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE_CODE);
        out.push(4);
        for d in t.shape().dims() {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&T::to_le_bytes_vec(t.data()));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Parse {
                offset: self.bytes.len(),
                msg: format!("truncated checkpoint while reading {what}"),
            }),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn err<T>(&self, at: usize, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: at,
            msg: msg.into(),
        })
    }
}

/// Parse a checkpoint whose tensors are all of dtype `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return r.err(0, "not a checkpoint (bad magic)");
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return r.err(4, format!("unsupported checkpoint version {version}"));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let at = r.pos;
        let len = r.u16("path length")? as usize;
        let path = std::str::from_utf8(r.take(len, "path")?)
            .or_else(|_| r.err(at + 2, format!("tensor {i}: path is not UTF-8")))?
            .to_string();
        let dt_at = r.pos;
        let dtype = r.u8("dtype")?;
        if dtype != 1 && dtype != 2 {
            return r.err(dt_at, format!("tensor `{path}`: unknown dtype code {dtype}"));
        }
        if dtype != T::DTYPE_CODE {
            return r.err(dt_at, format!("tensor `{path}`: dtype code {dtype}, expected {} ({})", T::DTYPE_CODE, T::NAME));
        }
        let nd_at = r.pos;
        let ndim = r.u8("ndim")? as usize;
        if ndim > 4 {
            return r.err(nd_at, format!("tensor `{path}`: {ndim} dimensions, at most 4 supported"));
        }
        let mut dims = [1usize; 4];
        for k in 0..ndim {
            dims[4 - ndim + k] = r.u32("dims")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let size = std::mem::size_of::<T>();
        let raw = r.take(shape.numel() * size, "tensor data")?;
        let data = raw.chunks_exact(size).map(T::from_le_chunk).collect();
        store
            .insert(path, Tensor::from_vec(shape, data)?)
            .or_else(|e| r.err(at, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(store)
}

pub fn save<T: Scalar>(path: &Path, params: &ParamStore<T>) -> Result<()> {
    Ok(fs::write(path, encode(params)?)?)
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    decode(&fs::read(path)?)
}
