//! `TSR1` tensor serialization.
//!
//! Layout: magic `TSR1`, one `u8` rank, `rank` little-endian `u32` extents,
//! then the row-major payload as little-endian `f32`.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"TSR1";

/// Bounds-checked little-endian cursor over an in-memory buffer.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        ByteReader { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                what: self.what,
                detail: format!(
                    "needed {n} bytes at offset {}, only {} remain",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            }),
        }
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let what = self.what;
        let found = self.take(4).map_err(|_| Error::BadMagic {
            what,
            expected,
            found: self.buf.to_vec(),
        })?;
        if found != expected {
            return Err(Error::BadMagic {
                what,
                expected,
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Malformed {
            what: self.what,
            detail: format!("payload of {n} floats overflows"),
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if self.is_at_end() {
            Ok(())
        } else {
            Err(Error::Malformed {
                what: self.what,
                detail: format!("{} trailing bytes", self.buf.len() - self.pos),
            })
        }
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Appends the `TSR1` encoding of `t` to `out`. Values are narrowed to `f32`.
pub fn encode_tensor_into<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::InvalidArgument(format!("rank {} exceeds 255", t.rank())))?;
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(rank);
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    out.reserve(4 * t.numel());
    for &x in t.data() {
        out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    Ok(())
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_tensor_into(t, &mut out)?;
    Ok(out)
}

pub(crate) fn read_tensor(r: &mut ByteReader<'_>) -> Result<Tensor<f32>> {
    r.magic(TENSOR_MAGIC)?;
    let rank = r.u8()? as usize;
    let shape = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Malformed {
            what: "tensor",
            detail: format!("extents {shape:?} overflow"),
        })?;
    let data = r.f32s(numel)?;
    Tensor::new(shape, data).map_err(|e| Error::Malformed {
        what: "tensor",
        detail: e.to_string(),
    })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = ByteReader::new(bytes, "tensor");
    let t = read_tensor(&mut r)?;
    r.expect_end()?;
    Ok(t)
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<std::path::Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_tensor(t)?).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<std::path::Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}
