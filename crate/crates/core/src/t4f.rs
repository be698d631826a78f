//! The T4F tensor file format.
//!
//! Layout: the 8-byte magic `b"T4F\0v001"`, four little-endian `u64` dims `(n, c, h, w)`,
//! then `n*c*h*w` little-endian IEEE-754 `f32` values in row-major order. Values are widened
//! to f64 on read and narrowed on write.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 8] = b"T4F\0v001";
pub const HEADER_LEN: usize = 8 + 4 * 8;

pub fn encode_t4f(t: &Tensor4) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(MAGIC);
    for d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_t4f(bytes: &[u8]) -> Result<Tensor4> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "t4f: {} bytes is shorter than the {}-byte header",
            bytes.len(),
            HEADER_LEN
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("t4f: bad magic".into()));
    }
    let mut shape = [0usize; 4];
    for (i, d) in shape.iter_mut().enumerate() {
        let mut raw = [0u8; 8];
        raw.copy_from_slice(&bytes[8 + 8 * i..16 + 8 * i]);
        *d = usize::try_from(u64::from_le_bytes(raw))
            .map_err(|_| Error::Format("t4f: dimension overflows usize".into()))?;
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("t4f: element count overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if count.checked_mul(4) != Some(payload.len()) {
        return Err(Error::Format(format!(
            "t4f: header declares {} values but payload has {} bytes",
            count,
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::Format("t4f: non-finite value".into()));
        }
        data.push(v as f64);
    }
    Tensor4::from_vec(shape, data)
}

pub fn write_t4f(path: impl AsRef<Path>, t: &Tensor4) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_t4f(t))?;
    Ok(())
}

pub fn read_t4f(path: impl AsRef<Path>) -> Result<Tensor4> {
    decode_t4f(&std::fs::read(path)?)
}
