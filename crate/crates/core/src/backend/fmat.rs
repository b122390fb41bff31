//! FMAT: a minimal binary container for one `f32` matrix.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "FMAT"
//!      4     4  version (u32 LE) = 1
//!      8     4  rows (u32 LE)
//!     12     4  cols (u32 LE)
//!     16  4*r*c payload, f32 LE, row-major
//! ```

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 4] = b"FMAT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Raw little-endian payload bytes of `m` in row-major order.
pub fn payload_bytes(m: &Array2<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 4);
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// CRC32 of the payload, as recorded in the store index.
pub fn payload_crc32(m: &Array2<f32>) -> u32 {
    crc32fast::hash(&payload_bytes(m))
}

pub fn encode(m: &Array2<f32>) -> Result<Vec<u8>> {
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return Err(format_err(8, format!("cannot encode empty {rows}x{cols} matrix")));
    }
    let rows32 = u32::try_from(rows).map_err(|_| format_err(8, "row count exceeds u32"))?;
    let cols32 = u32::try_from(cols).map_err(|_| format_err(12, "column count exceeds u32"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&cols32.to_le_bytes());
    out.extend(payload_bytes(m));
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

/// Parses only the header, returning `(rows, cols)`.
pub fn decode_header(bytes: &[u8]) -> Result<(usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            bytes.len(),
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let rows = read_u32(bytes, 8) as usize;
    let cols = read_u32(bytes, 12) as usize;
    if rows == 0 {
        return Err(format_err(8, "zero rows"));
    }
    if cols == 0 {
        return Err(format_err(12, "zero cols"));
    }
    Ok((rows, cols))
}

pub fn decode(bytes: &[u8]) -> Result<Array2<f32>> {
    let (rows, cols) = decode_header(bytes)?;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| format_err(8, "header dimensions overflow"))?;
    if bytes.len() < expected {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes for {rows}x{cols}, found {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(
            expected,
            format!("{} trailing bytes after {rows}x{cols} payload", bytes.len() - expected),
        ));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked against length"))
}

/// Writes atomically and returns the payload CRC32.
pub fn write_fmat(path: impl AsRef<Path>, m: &Array2<f32>) -> Result<u32> {
    let bytes = encode(m)?;
    fsutil::write_atomic(path.as_ref(), &bytes)?;
    Ok(crc32fast::hash(&bytes[HEADER_LEN..]))
}

pub fn read_fmat(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn offset_of(e: Error) -> u64 {
        match e {
            Error::Format { offset, .. } => offset,
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn header_layout() {
        let m = array![[1.0f32, -2.5], [0.0, 3.25], [f32::MIN_POSITIVE, -0.0]];
        let b = encode(&m).unwrap();
        assert_eq!(&b[0..4], b"FMAT");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[3, 0, 0, 0]);
        assert_eq!(&b[12..16], &[2, 0, 0, 0]);
        assert_eq!(b.len(), 16 + 3 * 2 * 4);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&b[20..24], &(-2.5f32).to_le_bytes());
        let back = decode(&b).unwrap();
        assert_eq!(back.mapv(f32::to_bits), m.mapv(f32::to_bits));
    }

    #[test]
    fn nan_payload_preserved() {
        let weird = f32::from_bits(0x7fc0_1234);
        let m = Array2::from_elem((1, 1), weird);
        let back = decode(&encode(&m).unwrap()).unwrap();
        assert_eq!(back[[0, 0]].to_bits(), 0x7fc0_1234);
    }

    #[test]
    fn rejects_bad_input() {
        let m = Array2::from_elem((2, 3), 1.5f32);
        let good = encode(&m).unwrap();

        assert_eq!(offset_of(decode(&good[..10]).unwrap_err()), 10);
        assert_eq!(offset_of(decode(&good[..good.len() - 1]).unwrap_err()), 39);

        let mut extra = good.clone();
        extra.push(0);
        assert_eq!(offset_of(decode(&extra).unwrap_err()), 40);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert_eq!(offset_of(decode(&bad_magic).unwrap_err()), 0);

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert_eq!(offset_of(decode(&bad_version).unwrap_err()), 4);

        let mut zero_rows = good;
        zero_rows[8] = 0;
        assert_eq!(offset_of(decode(&zero_rows).unwrap_err()), 8);

        assert!(encode(&Array2::<f32>::zeros((0, 3))).is_err());
    }

    #[test]
    fn file_round_trip_and_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.fmat");
        let m = Array2::from_shape_fn((4, 5), |(i, j)| (i * 5 + j) as f32 * 0.1);
        let crc = write_fmat(&p, &m).unwrap();
        assert_eq!(crc, payload_crc32(&m));
        assert_eq!(read_fmat(&p).unwrap(), m);
        assert!(matches!(read_fmat(dir.path().join("missing.fmat")), Err(Error::Io { .. })));
    }

    #[test]
    fn transposed_view_written_in_logical_order() {
        let m = Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f32);
        let t = m.t().to_owned();
        let back = decode(&encode(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back[[2, 1]], 5.0);
    }
}
