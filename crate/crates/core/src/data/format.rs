//! Native patch formats.
//!
//! * `MSP1` image: magic, little-endian `u32` bands, height, width, then the
//!   planar (band-major, row-major) `f32` payload.
//! * `MSK1` mask: magic, little-endian `u32` height, width, then row-major
//!   `u8` labels.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::io::{put_u32, ByteReader};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: [u8; 4] = *b"MSP1";
pub const MASK_MAGIC: [u8; 4] = *b"MSK1";

/// Integer label raster; `0` marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(Error::shape(
                "mask",
                format!("{} labels for {height}×{width}", data.len()),
            ));
        }
        Ok(Mask { height, width, data })
    }

    /// Fails on the first label above `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v as usize > num_classes) {
            None => Ok(()),
            Some(i) => Err(Error::LabelOutOfRange {
                value: self.data[i],
                max: num_classes,
                row: i / self.width,
                col: i % self.width,
            }),
        }
    }
}

pub fn encode_image(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [bands, h, w] = *image.shape() else {
        return Err(Error::shape("encode_image", format!("expected bands×H×W, got {:?}", image.shape())));
    };
    let mut out = IMAGE_MAGIC.to_vec();
    put_u32(&mut out, bands)?;
    put_u32(&mut out, h)?;
    put_u32(&mut out, w)?;
    out.reserve(4 * image.numel());
    for &x in image.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = ByteReader::new(bytes, "MSP image");
    r.magic(IMAGE_MAGIC)?;
    let bands = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n = bands
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Malformed {
            what: "MSP image",
            detail: format!("invalid extents {bands}×{h}×{w}"),
        })?;
    let data = r.f32s(n)?;
    r.expect_end()?;
    Tensor::new(vec![bands, h, w], data)
}

pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    let mut out = MASK_MAGIC.to_vec();
    put_u32(&mut out, mask.height)?;
    put_u32(&mut out, mask.width)?;
    out.extend_from_slice(&mask.data);
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let mut r = ByteReader::new(bytes, "MSK mask");
    r.magic(MASK_MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n = h.checked_mul(w).filter(|&n| n > 0).ok_or_else(|| Error::Malformed {
        what: "MSK mask",
        detail: format!("invalid extents {h}×{w}"),
    })?;
    let data = r.take(n)?.to_vec();
    r.expect_end()?;
    Mask::new(h, w, data)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_image(&read(path.as_ref())?)
}

pub fn write_image(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    write(path.as_ref(), &encode_image(image)?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    decode_mask(&read(path.as_ref())?)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    write(path.as_ref(), &encode_mask(mask)?)
}
