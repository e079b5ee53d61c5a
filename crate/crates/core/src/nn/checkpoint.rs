//! `CKPT` files: magic, `u32` record count, then per record a `u32`
//! length-prefixed UTF-8 name followed by a `TSR1` tensor.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::io::{encode_tensor_into, put_u32, read_tensor, ByteReader};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CKPT";

pub fn encode_checkpoint<T: Scalar>(records: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    put_u32(&mut out, records.len())?;
    for (name, t) in records {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        encode_tensor_into(t, &mut out)?;
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = ByteReader::new(bytes, "checkpoint");
    r.magic(CHECKPOINT_MAGIC)?;
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Malformed {
                what: "checkpoint",
                detail: format!("record name is not UTF-8: {e}"),
            })?
            .to_string();
        let t = read_tensor(&mut r)?;
        records.push((name, t));
    }
    r.expect_end()?;
    Ok(records)
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, records: &[(String, Tensor<T>)]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(records)?;
    // Write-then-rename so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let records = vec![
            ("a.weight".to_string(), Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap()),
            ("b".to_string(), Tensor::scalar(0.25f32)),
        ];
        let back = decode_checkpoint(&encode_checkpoint(&records).unwrap()).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn rejects_foreign_magic_and_truncation() {
        let bytes = encode_checkpoint(&[("x".to_string(), Tensor::scalar(1.0f32))]).unwrap();
        let mut wrong = bytes.clone();
        wrong[..4].copy_from_slice(b"CKP2");
        assert!(matches!(decode_checkpoint(&wrong), Err(Error::BadMagic { .. })));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 2]),
            Err(Error::Truncated { .. })
        ));
    }
}
