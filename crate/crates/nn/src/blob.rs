//! Binary parameter blobs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "VPNN" | u32 version | u32 count
//! count x { u16 name_len | name (utf-8) | u8 dtype | u8 ndim | ndim x u64 dim | data }
//! ```
//!
//! `dtype` is 0 for f32 and 1 for f64. Trailing bytes are rejected.

use thiserror::Error;

use crate::param::{Module, Param};
use crate::real::{DType, Real};

pub const MAGIC: &[u8; 4] = b"VPNN";
pub const VERSION: u32 = 1;
const MAX_NDIM: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BlobError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported blob version {0}")]
    Version(u32),
    #[error("blob truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown dtype tag {0}")]
    DType(u8),
    #[error("tensor rank {0} exceeds limit")]
    Rank(usize),
    #[error("tensor size overflows")]
    Overflow,
    #[error("tensor name is not valid utf-8")]
    Name,
    #[error("{0} trailing bytes after last tensor")]
    Trailing(usize),
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("duplicate tensor `{0}`")]
    Duplicate(String),
}

/// A decoded tensor, widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode<T: Real>(entries: &[(String, &Param<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, p) in entries {
        let nb = name.as_bytes();
        assert!(nb.len() <= u16::MAX as usize, "tensor name too long");
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(T::DTYPE.tag());
        out.push(p.shape().len() as u8);
        for &d in p.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.value {
            match T::DTYPE {
                DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BlobError> {
        let end = self.pos.checked_add(n).ok_or(BlobError::Overflow)?;
        if end > self.buf.len() {
            return Err(BlobError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, BlobError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, BlobError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, BlobError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, BlobError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedArray>, BlobError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| BlobError::BadMagic)? != MAGIC {
        return Err(BlobError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(BlobError::Version(version));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| BlobError::Name)?.to_string();
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or(BlobError::DType(tag))?;
        let ndim = r.u8()? as usize;
        if ndim > MAX_NDIM {
            return Err(BlobError::Rank(ndim));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = usize::try_from(r.u64()?).map_err(|_| BlobError::Overflow)?;
            numel = numel.checked_mul(d).ok_or(BlobError::Overflow)?;
            shape.push(d);
        }
        let nbytes = numel.checked_mul(dtype.size()).ok_or(BlobError::Overflow)?;
        let raw = r.take(nbytes)?;
        let data = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        if out.iter().any(|a: &NamedArray| a.name == name) {
            return Err(BlobError::Duplicate(name));
        }
        out.push(NamedArray { name, dtype, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(BlobError::Trailing(bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn save_module<T: Real, M: Module<T>>(module: &M) -> Vec<u8> {
    encode(&module.named_params())
}

/// Overwrites every parameter of `module` from a decoded blob, matching by
/// name and shape.
pub fn load_module<T: Real, M: Module<T>>(module: &mut M, bytes: &[u8]) -> Result<(), BlobError> {
    let arrays = decode(bytes)?;
    let names: Vec<(String, Vec<usize>)> =
        module.named_params().into_iter().map(|(n, p)| (n, p.shape().to_vec())).collect();
    let mut params = module.params_mut();
    for ((name, shape), p) in names.iter().zip(params.iter_mut()) {
        let arr = arrays.iter().find(|a| &a.name == name).ok_or_else(|| BlobError::Missing(name.clone()))?;
        if &arr.shape != shape {
            return Err(BlobError::Shape { name: name.clone(), expected: shape.clone(), found: arr.shape.clone() });
        }
        for (v, &x) in p.value.iter_mut().zip(&arr.data) {
            *v = T::of(x);
        }
        p.zero_grad();
    }
    Ok(())
}
