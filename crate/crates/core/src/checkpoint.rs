//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CVLV" | version u32 | count u32 |
//!   count x ( name_len u32 | name utf8 | dtype u8 | rank u32 | dims u32 x rank | payload )
//! ```
//!
//! Entries are written in sorted name order, so identical maps produce
//! identical bytes. dtype 0 is f32, 1 is f64.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CVLV";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Converted to `T`; exact when the stored dtype is `T`.
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for StoredTensor {
    fn from(t: Tensor<f32>) -> Self {
        StoredTensor::F32(t)
    }
}

impl From<Tensor<f64>> for StoredTensor {
    fn from(t: Tensor<f64>) -> Self {
        StoredTensor::F64(t)
    }
}

pub type Checkpoint = BTreeMap<String, StoredTensor>;

/// Wrap a typed map for saving.
pub fn to_checkpoint<T: Scalar>(params: &BTreeMap<String, Tensor<T>>) -> Checkpoint
where
    StoredTensor: From<Tensor<T>>,
{
    params
        .iter()
        .map(|(k, v)| (k.clone(), StoredTensor::from(v.clone())))
        .collect()
}

/// Every entry converted to `T`.
pub fn typed<T: Scalar>(ckpt: &Checkpoint) -> BTreeMap<String, Tensor<T>> {
    ckpt.iter().map(|(k, v)| (k.clone(), v.to())).collect()
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_payload<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode(params: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, params.len())?;
    for (name, t) in params {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype().code());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        match t {
            StoredTensor::F32(t) => put_payload(&mut out, t),
            StoredTensor::F64(t) => put_payload(&mut out, t),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, entry: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Truncated {
            entry: entry.to_string(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, entry: &str) -> Result<usize> {
        let b = self.take(4, entry)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

fn read_payload<T: Scalar>(raw: &[u8], shape: Vec<usize>) -> Result<Tensor<T>> {
    let data = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "<header>").map_err(|_| Error::BadMagic {
        expected: "CVLV".into(),
        found: String::from_utf8_lossy(bytes).into_owned(),
    })?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: "CVLV".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = c.u32("<header>")? as u32;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = c.u32("<header>")?;
    let mut out = Checkpoint::new();
    for i in 0..count {
        let placeholder = format!("<entry {i}>");
        let name_len = c.u32(&placeholder)?;
        let name = std::str::from_utf8(c.take(name_len, &placeholder)?)
            .map_err(|_| Error::Format {
                offset: c.pos - name_len,
                msg: format!("entry {i} name is not valid UTF-8"),
            })?
            .to_string();
        let code = c.take(1, &name)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format {
            offset: c.pos - 1,
            msg: format!("entry {name:?} has unknown dtype code {code}"),
        })?;
        let rank = c.u32(&name)?;
        let shape = (0..rank).map(|_| c.u32(&name)).collect::<Result<Vec<_>>>()?;
        if shape.contains(&0) {
            return Err(Error::Format {
                offset: c.pos,
                msg: format!("entry {name:?} has a zero dimension in {shape:?}"),
            });
        }
        let n = shape
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Truncated { entry: name.clone() })?;
        let raw = c.take(n, &name)?;
        let t = match dtype {
            DType::F32 => StoredTensor::F32(read_payload(raw, shape)?),
            DType::F64 => StoredTensor::F64(read_payload(raw, shape)?),
        };
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::DuplicateName(name));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos,
            msg: format!("{} trailing bytes after the last entry", bytes.len() - c.pos),
        });
    }
    Ok(out)
}

pub fn save(params: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_map() {
        let bytes = encode(&Checkpoint::new()).unwrap();
        assert_eq!(bytes, b"CVLV\x01\0\0\0\0\0\0\0");
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn version_two_rejected() {
        assert!(matches!(decode(b"CVLV\x02\0\0\0\0\0\0\0"), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        assert!(decode(b"CVLV\x01\0\0\0\0\0\0\0\0").is_err());
    }
}
