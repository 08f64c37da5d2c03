//! Reader and writer for the IDX container format used by the MNIST family
//! of datasets: a big-endian header (`0x00 0x00 <dtype> <ndims>` followed by
//! one u32 per dimension) and a row-major payload. Only the unsigned-byte
//! dtype (0x08) is needed here.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

pub const DTYPE_U8: u8 = 0x08;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x}, expected dtype 0x08 with {expected_dims} dims")]
    BadMagic { path: String, found: u32, expected_dims: u8 },
    #[error("{path}: payload truncated: expected {expected} bytes, got {got}")]
    Truncated { path: String, expected: usize, got: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> IdxError {
    IdxError::Io { path: path.display().to_string(), source }
}

/// Writes a u8 tensor of the given dimensions to `path` in IDX format.
pub fn write_u8(path: &Path, dims: &[u32], data: &[u8]) -> Result<(), IdxError> {
    let expected: usize = dims.iter().map(|&d| d as usize).product();
    assert_eq!(data.len(), expected, "payload length must match dims");
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let magic = (u32::from(DTYPE_U8) << 8) | dims.len() as u32;
    w.write_u32::<BigEndian>(magic).map_err(|e| io_err(path, e))?;
    for &d in dims {
        w.write_u32::<BigEndian>(d).map_err(|e| io_err(path, e))?;
    }
    w.write_all(data).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a u8 tensor from `path`, returning its dimensions and payload.
///
/// `expected_dims`, when given, is validated against the magic number so a
/// label file cannot be loaded where an image file is expected.
pub fn read_u8(path: &Path, expected_dims: Option<u8>) -> Result<(Vec<u32>, Vec<u8>), IdxError> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let magic = r.read_u32::<BigEndian>().map_err(|e| io_err(path, e))?;
    let dtype = ((magic >> 8) & 0xff) as u8;
    let ndims = (magic & 0xff) as u8;
    let magic_ok = magic >> 16 == 0
        && dtype == DTYPE_U8
        && ndims >= 1
        && expected_dims.map_or(true, |e| e == ndims);
    if !magic_ok {
        return Err(IdxError::BadMagic {
            path: path.display().to_string(),
            found: magic,
            expected_dims: expected_dims.unwrap_or(ndims),
        });
    }
    let mut dims = Vec::with_capacity(ndims as usize);
    for _ in 0..ndims {
        dims.push(r.read_u32::<BigEndian>().map_err(|e| io_err(path, e))?);
    }
    let expected: usize = dims.iter().map(|&d| d as usize).product();
    let mut data = Vec::with_capacity(expected);
    r.read_to_end(&mut data).map_err(|e| io_err(path, e))?;
    if data.len() != expected {
        return Err(IdxError::Truncated {
            path: path.display().to_string(),
            expected,
            got: data.len(),
        });
    }
    Ok((dims, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_file_magic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels-idx1-ubyte");
        write_u8(&path, &[3], &[7, 1, 4]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], &[0x00, 0x00, 0x08, 0x01]);
        assert_eq!(&bytes[4..8], &[0, 0, 0, 3]);
        assert_eq!(&bytes[8..], &[7, 1, 4]);
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.idx");
        let data: Vec<u8> = (0..24).collect();
        write_u8(&path, &[2, 3, 4], &data).unwrap();
        let (dims, got) = read_u8(&path, Some(3)).unwrap();
        assert_eq!(dims, vec![2, 3, 4]);
        assert_eq!(got, data);
    }

    #[test]
    fn wrong_dim_count_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.idx");
        write_u8(&path, &[4], &[1, 2, 3, 4]).unwrap();
        let err = read_u8(&path, Some(3)).unwrap_err();
        assert!(matches!(err, IdxError::BadMagic { .. }));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.idx");
        write_u8(&path, &[2, 2], &[9, 8, 7, 6]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        let err = read_u8(&path, Some(2)).unwrap_err();
        assert!(matches!(err, IdxError::Truncated { expected: 4, got: 2, .. }));
    }
}
