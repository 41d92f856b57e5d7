//! Checkpoint container: a JSON manifest plus named tensors.
//!
//! ```text
//! "ICCK" | version u8 | manifest_len u64 | manifest (UTF-8 JSON)
//! count u32 | count x { name_len u32 | name | tensor (ICTN encoding) }
//! ```
//! All integers little-endian.

use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{tensor_to_bytes, Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ICCK";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<E: Element> {
    pub manifest: Value,
    pub tensors: Vec<(String, Tensor<E>)>,
}

impl<E: Element> Checkpoint<E> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&tensor_to_bytes(t));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, msg: &str| Error::Format {
            path: PathBuf::from(path),
            offset: offset as u64,
            msg: msg.to_string(),
        };
        let take = |pos: usize, n: usize| -> Result<&[u8]> {
            bytes.get(pos..pos + n).ok_or_else(|| fail(bytes.len(), "truncated checkpoint"))
        };
        if take(0, 4)? != CHECKPOINT_MAGIC {
            return Err(fail(0, "bad checkpoint magic"));
        }
        if take(4, 1)?[0] != VERSION {
            return Err(fail(4, "unsupported checkpoint version"));
        }
        let mlen = u64::from_le_bytes(take(5, 8)?.try_into().unwrap()) as usize;
        let manifest: Value =
            serde_json::from_slice(take(13, mlen)?).map_err(|e| fail(13, &format!("manifest: {e}")))?;
        let mut pos = 13 + mlen;
        let count = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
        pos += 4;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
            pos += 4;
            let name = std::str::from_utf8(take(pos, nlen)?)
                .map_err(|_| fail(pos, "tensor name is not UTF-8"))?
                .to_string();
            pos += nlen;
            let (t, used) = crate::tensor::decode_at(&bytes[pos..], path, pos)?;
            pos += used;
            tensors.push((name, t));
        }
        if pos != bytes.len() {
            return Err(fail(pos, "trailing bytes after checkpoint"));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path)?, path)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn roundtrip_through_file() {
        let ck = Checkpoint {
            manifest: json!({ "layers": [{ "kind": "dense" }] }),
            tensors: vec![
                ("head.weight".to_string(), Tensor::<f64>::from_fn(&[2, 3], |i| i as f64)),
                ("head.bias".to_string(), Tensor::<f64>::zeros(&[2])),
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ck");
        ck.write(&p).unwrap();
        let back = Checkpoint::<f64>::read(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get("head.bias").unwrap().shape(), &[2]);
    }

    #[test]
    fn truncation_reports_offset() {
        let ck = Checkpoint {
            manifest: json!({}),
            tensors: vec![("w".to_string(), Tensor::<f32>::ones(&[4]))],
        };
        let bytes = ck.to_bytes().unwrap();
        let err = Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
