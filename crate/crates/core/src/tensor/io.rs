//! Little-endian tensor serialization.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "ICTN"
//! 4       1         format version (1)
//! 5       1         dtype flag: 4 = f32, 8 = f64
//! 6       4         rank r (u32)
//! 10      8*r       dims (u64 each)
//! 10+8r   len*size  payload, row-major, little-endian
//! ```

use std::path::{Path, PathBuf};

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"ICTN";
const VERSION: u8 = 1;

pub fn tensor_to_bytes<E: Element>(t: &Tensor<E>) -> Vec<u8> {
    let elem = E::DTYPE.flag() as usize;
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + elem * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(VERSION);
    out.push(E::DTYPE.flag());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes a tensor, converting the stored precision to `E` if they differ.
pub fn tensor_from_bytes<E: Element>(bytes: &[u8]) -> Result<Tensor<E>> {
    decode(bytes, Path::new("<memory>")).map(|(t, _)| t)
}

/// Decodes one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub(crate) fn decode<E: Element>(bytes: &[u8], path: &Path) -> Result<(Tensor<E>, usize)> {
    decode_at(bytes, path, 0)
}

/// Like [`decode`], reporting error offsets relative to `base` in the file.
pub(crate) fn decode_at<E: Element>(bytes: &[u8], path: &Path, base: usize) -> Result<(Tensor<E>, usize)> {
    let fail = |offset: usize, msg: &str| Error::Format {
        path: PathBuf::from(path),
        offset: (base + offset) as u64,
        msg: msg.to_string(),
    };
    if bytes.len() < 10 {
        return Err(fail(bytes.len(), "truncated header"));
    }
    if &bytes[0..4] != TENSOR_MAGIC {
        return Err(fail(0, "bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(fail(4, "unsupported version"));
    }
    let dtype = DType::from_flag(bytes[5]).ok_or_else(|| fail(5, "unknown dtype flag"))?;
    let rank = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let mut pos = 10;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let end = pos + 8;
        if bytes.len() < end {
            return Err(fail(bytes.len(), "truncated dims"));
        }
        let d = u64::from_le_bytes(bytes[pos..end].try_into().unwrap());
        if d == 0 {
            return Err(fail(pos, "zero dimension"));
        }
        shape.push(d as usize);
        pos = end;
    }
    let len: usize = shape.iter().product();
    let elem = dtype.flag() as usize;
    let end = pos + len * elem;
    if bytes.len() < end {
        return Err(fail(bytes.len(), "truncated payload"));
    }
    let payload = &bytes[pos..end];
    let data: Vec<E> = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| E::lit(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| E::lit(f64::read_le(c))).collect(),
    };
    Ok((Tensor::new(&shape, data)?, end))
}

pub fn write_tensor<E: Element>(path: impl AsRef<Path>, t: &Tensor<E>) -> Result<()> {
    std::fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

pub fn read_tensor<E: Element>(path: impl AsRef<Path>) -> Result<Tensor<E>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let (t, used) = decode(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: used as u64,
            msg: "trailing bytes after tensor".into(),
        });
    }
    Ok(t)
}
