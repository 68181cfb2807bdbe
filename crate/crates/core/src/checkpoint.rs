//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MVKD" | version u32 | count u32 |
//!   count × (name_len u16 | name utf-8 | ndim u8 | dims u32… | f32 payload) |
//! crc32 u32 over every preceding byte
//! ```
//!
//! Entries are written in name order, so saving a loaded checkpoint
//! reproduces the original bytes.

use std::path::Path;

use thiserror::Error;

use crate::numerics::Tensor;
use crate::params::NamedTensors;

pub const MAGIC: &[u8; 4] = b"MVKD";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint fingerprint {found:016x} does not match configuration fingerprint {expected:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("checkpoint is missing entry `{0}`")]
    Missing(String),
}

pub fn encode(entries: &NamedTensors) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| CheckpointError::Malformed("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| CheckpointError::Malformed(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let ndim = u8::try_from(t.ndim()).map_err(|_| CheckpointError::Malformed(format!("rank too high: {name}")))?;
        out.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| CheckpointError::Malformed(format!("dim too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated("magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated("header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 8 };
    let count = r.u32("entry count")?;
    let mut entries = NamedTensors::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::Malformed("entry name is not utf-8".into()))?
            .to_string();
        let ndim = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("entry {name} is too large")))?;
        let data = r
            .take(numel, "payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if entries.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate entry {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &NamedTensors) -> crate::Result<()> {
    let bytes = encode(entries)?;
    std::fs::write(path, bytes).map_err(|e| crate::Error::io(path, e))
}

pub fn load(path: &Path) -> crate::Result<NamedTensors> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

/// Stores a `u64` exactly as two raw `f32` bit patterns.
pub fn u64_entry(v: u64) -> Tensor {
    let lo = f32::from_bits(v as u32);
    let hi = f32::from_bits((v >> 32) as u32);
    Tensor::vector(vec![lo, hi])
}

pub fn read_u64_entry(entries: &NamedTensors, name: &str) -> Result<u64, CheckpointError> {
    let t = entries.get(name).ok_or_else(|| CheckpointError::Missing(name.into()))?;
    match t.data() {
        [lo, hi] => Ok(u64::from(lo.to_bits()) | (u64::from(hi.to_bits()) << 32)),
        _ => Err(CheckpointError::Malformed(format!("{name} must hold two words"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedTensors {
        let mut m = NamedTensors::new();
        m.insert("b".into(), Tensor::from_rows(&[vec![1.0, -2.5], vec![3.0, f32::MIN_POSITIVE]]));
        m.insert("a".into(), Tensor::scalar(7.0));
        m.insert("meta.fp".into(), u64_entry(0xdead_beef_0123_4567));
        m
    }

    #[test]
    fn reencode_is_byte_identical() {
        let bytes = encode(&sample()).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(encode(&back).unwrap(), bytes);
        assert_eq!(read_u64_entry(&back, "meta.fp").unwrap(), 0xdead_beef_0123_4567);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = encode(&sample()).unwrap();
        let k = bytes.len() / 2;
        bytes[k] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(CheckpointError::CrcMismatch { .. })));
    }

    #[test]
    fn header_errors() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(decode(&bytes[..3]), Err(CheckpointError::Truncated("magic")));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad), Err(CheckpointError::BadMagic));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert_eq!(decode(&v2), Err(CheckpointError::UnsupportedVersion(2)));
        let mut cut = bytes[..bytes.len() - 9].to_vec();
        let crc = crc32fast::hash(&cut);
        cut.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&cut), Err(CheckpointError::Truncated(_))));
    }
}
