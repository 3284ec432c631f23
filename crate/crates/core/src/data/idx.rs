//! IDX files with unsigned-byte payloads (the MNIST container).

use std::fs;
use std::path::Path;

use aod_substrate::Tensor;

use crate::error::{AodError, Result};

const U8_TYPE: u8 = 0x08;

fn format_err(offset: usize, detail: impl Into<String>) -> AodError {
    AodError::Format {
        offset,
        detail: detail.into(),
    }
}

/// Dimensions and raw bytes of an IDX file.
pub fn parse_idx_raw(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "truncated magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(0, "magic must start with two zero bytes"));
    }
    if bytes[2] != U8_TYPE {
        return Err(format_err(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(format_err(3, "rank must be at least 1"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 4 + 4 * i;
        let b = bytes
            .get(at..at + 4)
            .ok_or_else(|| format_err(bytes.len(), format!("truncated dimension {i}")))?;
        dims.push(u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize);
    }
    let start = 4 + 4 * rank;
    let n: usize = dims.iter().product();
    if bytes.len() < start + n {
        return Err(format_err(bytes.len(), format!("truncated payload: expected {n} bytes after offset {start}")));
    }
    if bytes.len() > start + n {
        return Err(format_err(start + n, "trailing bytes after payload"));
    }
    Ok((dims, bytes[start..].to_vec()))
}

/// Parses an IDX byte buffer and scales the payload to `[0, 1]`.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    let (dims, raw) = parse_idx_raw(bytes)?;
    Ok(Tensor::new(&dims, raw.iter().map(|&b| b as f64 / 255.0).collect())?)
}

pub fn load_idx(path: &Path) -> Result<Tensor> {
    parse_idx(&fs::read(path)?)
}

/// Encodes values in `[0, 1]` as an unsigned-byte IDX buffer, rounding to
/// the nearest of the 256 levels.
pub fn encode_idx(dims: &[usize], values: &[f64]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > 255 || dims.iter().product::<usize>() != values.len() {
        return Err(AodError::Contract(format!("{} values do not fit dims {dims:?}", values.len())));
    }
    let mut out = vec![0, 0, U8_TYPE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_idx(path: &Path, dims: &[usize], values: &[f64]) -> Result<()> {
    fs::write(path, encode_idx(dims, values)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_cube() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend([0, 51, 102, 153, 204, 255, 0, 255]);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(t.data(), &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn truncated_payload_reports_end_offset() {
        let bytes = vec![0, 0, 8, 1, 0, 0, 0, 4, 1, 2];
        match parse_idx(&bytes) {
            Err(AodError::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx(&[1, 0, 8, 1]), Err(AodError::Format { offset: 0, .. })));
    }

    #[test]
    fn byte_levels_round_trip() {
        let values: Vec<f64> = (0..=255).map(|b| b as f64 / 255.0).collect();
        let back = parse_idx(&encode_idx(&[256], &values).unwrap()).unwrap();
        assert_eq!(back.data(), values.as_slice());
    }
}
