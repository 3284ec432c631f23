//! Flat binary container for named tensors.
//!
//! Layout (little-endian): the magic `AODT`, a `u32` version, then entries of
//! `name_len: u32`, UTF-8 name, `rank: u32`, `rank` dims as `u32`, and the
//! `f64` payload, repeated until end of input.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, SubstrateError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AODT";
pub const VERSION: u32 = 1;

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(SubstrateError::Format {
                offset: self.pos,
                detail: format!("truncated {what}: need {n} bytes, have {}", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(SubstrateError::Format {
            offset: 0,
            detail: "bad magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(SubstrateError::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let mut entries = Vec::new();
    while r.pos < bytes.len() {
        let start = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| SubstrateError::Format {
                offset: start + 4,
                detail: format!("name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| SubstrateError::Format {
            offset: start,
            detail: format!("entry `{name}`: {e}"),
        })?;
        entries.push((name, t));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(entries))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_and_bits() {
        let entries = vec![
            ("a/w".to_string(), Tensor::new(&[2, 3], vec![0.1, -2.0, 3.5, 1e-300, -0.0, 7.0]).unwrap()),
            ("b".to_string(), Tensor::scalar(f64::MAX)),
        ];
        let back = decode(&encode(&entries)).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&[("w".to_string(), Tensor::scalar(1.0))]);
        let cut = &bytes[..bytes.len() - 3];
        match decode(cut) {
            Err(SubstrateError::Format { offset, .. }) => assert_eq!(offset, 4 + 4 + 4 + 1 + 4 + 4),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(decode(b"NOPE"), Err(SubstrateError::Format { offset: 0, .. })));
    }
}
