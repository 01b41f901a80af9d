//! Binary checkpoint container shared by the gazer ("AGZE") and the
//! reconstructor ("AGZR").
//!
//! Layout: 4 magic bytes, u32 LE version, u32 LE config length, UTF-8 JSON
//! config, then tensor records until EOF. Each record is
//! {u16 LE name length, name, u8 dtype tag (0 = f32, 1 = f64), u8 rank,
//! u32 LE dims..., little-endian payload}.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorData;

pub const MAGIC_GAZER: [u8; 4] = *b"AGZE";
pub const MAGIC_RECON: [u8; 4] = *b"AGZR";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<S: Scalar>(
    path: &Path,
    magic: [u8; 4],
    config_json: &str,
    tensors: &[(String, &TensorData<S>)],
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    for (name, tensor) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(S::DTYPE);
        out.push(tensor.shape.len() as u8);
        for &d in &tensor.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &tensor.data {
            v.write_le(&mut out);
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    // atomic publish: the file either exists complete or not at all
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                expected: (self.pos + n) as u64,
                actual: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Read a checkpoint, returning the embedded config JSON and the tensor
/// table in file order.
pub fn read_checkpoint<S: Scalar>(
    path: &Path,
    magic: [u8; 4],
) -> Result<(String, Vec<(String, TensorData<S>)>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let found = r.take(4)?;
    if found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?} (expected {:?})",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let clen = r.u32()? as usize;
    let config = String::from_utf8(r.take(clen)?.to_vec())
        .map_err(|e| Error::Format(format!("config not UTF-8: {e}")))?;
    let mut tensors = Vec::new();
    while r.pos < r.buf.len() {
        let nlen = r.u16()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|e| Error::Format(format!("tensor name not UTF-8: {e}")))?;
        let dtype = r.u8()?;
        if dtype != S::DTYPE {
            return Err(Error::Format(format!(
                "tensor {name:?} has dtype tag {dtype}, expected {}",
                S::DTYPE
            )));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * S::BYTES)?;
        let data = payload.chunks_exact(S::BYTES).map(S::read_le).collect();
        tensors.push((name, TensorData::new(shape, data)));
    }
    Ok((config, tensors))
}

/// Restore a named-tensor table into a model via its visitor, enforcing an
/// exact name/shape match.
pub fn assign_tensors<S: Scalar>(
    loaded: Vec<(String, TensorData<S>)>,
    visit_mut: impl FnOnce(&mut dyn FnMut(String, &mut TensorData<S>)),
) -> Result<()> {
    let mut map: std::collections::BTreeMap<String, TensorData<S>> = loaded.into_iter().collect();
    let mut error: Option<Error> = None;
    visit_mut(&mut |name: String, slot: &mut TensorData<S>| {
        if error.is_some() {
            return;
        }
        match map.remove(&name) {
            Some(t) if t.shape == slot.shape => *slot = t,
            Some(t) => {
                error = Some(Error::Format(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    t.shape, slot.shape
                )))
            }
            None => error = Some(Error::Format(format!("missing tensor {name:?}"))),
        }
    });
    if let Some(e) = error {
        return Err(e);
    }
    if let Some((name, _)) = map.into_iter().next() {
        return Err(Error::Format(format!("unknown tensor {name:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("autogaze_ckpt_tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_bit_exact() {
        let path = tmp("rt.agz");
        let a = TensorData::new(
            vec![2, 3],
            vec![1.5f32, -2.25, 0.0, 3.5, f32::MIN_POSITIVE, 9.0],
        );
        let b = TensorData::new(vec![4], vec![0.1f32, 0.2, 0.3, 0.4]);
        write_checkpoint(
            &path,
            MAGIC_GAZER,
            "{\"x\":1}",
            &[("a".into(), &a), ("deep.b".into(), &b)],
        )
        .unwrap();
        let (cfg, tensors) = read_checkpoint::<f32>(&path, MAGIC_GAZER).unwrap();
        assert_eq!(cfg, "{\"x\":1}");
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].0, "a");
        assert_eq!(tensors[0].1, a);
        assert_eq!(tensors[1].1, b);
    }

    #[test]
    fn tampered_magic_rejected() {
        let path = tmp("magic.agz");
        let a = TensorData::new(vec![1], vec![1.0f32]);
        write_checkpoint(&path, MAGIC_RECON, "{}", &[("a".into(), &a)]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_checkpoint::<f32>(&path, MAGIC_RECON),
            Err(Error::Format(_))
        ));
        // also: right magic, wrong expectation
        write_checkpoint(&path, MAGIC_RECON, "{}", &[("a".into(), &a)]).unwrap();
        assert!(matches!(
            read_checkpoint::<f32>(&path, MAGIC_GAZER),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let path = tmp("trunc.agz");
        let a = TensorData::new(vec![8], vec![1.0f32; 8]);
        write_checkpoint(&path, MAGIC_GAZER, "{}", &[("a".into(), &a)]).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            read_checkpoint::<f32>(&path, MAGIC_GAZER),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn version_mismatch_rejected() {
        let path = tmp("ver.agz");
        let a = TensorData::new(vec![1], vec![1.0f32]);
        write_checkpoint(&path, MAGIC_GAZER, "{}", &[("a".into(), &a)]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_checkpoint::<f32>(&path, MAGIC_GAZER),
            Err(Error::Version { found: 99, .. })
        ));
    }

    #[test]
    fn f64_roundtrip() {
        let path = tmp("f64.agz");
        let a = TensorData::new(vec![3], vec![1.0f64 / 3.0, -0.0, 1e-300]);
        write_checkpoint(&path, MAGIC_RECON, "{}", &[("a".into(), &a)]).unwrap();
        let (_, tensors) = read_checkpoint::<f64>(&path, MAGIC_RECON).unwrap();
        assert_eq!(tensors[0].1, a);
        // dtype tag guards against reading with the wrong scalar
        assert!(read_checkpoint::<f32>(&path, MAGIC_RECON).is_err());
    }
}
