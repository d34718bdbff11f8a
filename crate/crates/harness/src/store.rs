//! On-disk formats: atomic writes, checksums, and the binary matrix format.
//!
//! A matrix file is a 16-byte little-endian header followed by the entries in
//! column-major order:
//!
//! | bytes | field                  |
//! |-------|------------------------|
//! | 0..4  | magic `TLMX`           |
//! | 4..8  | dtype (`1` = f64)      |
//! | 8..12 | rows (u32)             |
//! | 12..16| cols (u32)             |

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const MAGIC: [u8; 4] = *b"TLMX";
pub const DTYPE_F64: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Writes to a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

pub fn encode_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes one matrix from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode_matrix(bytes: &[u8]) -> Result<(DMatrix<f64>, usize)> {
    let bad = |msg: &str| HarnessError::Format(msg.to_string());
    if bytes.len() < HEADER_LEN || bytes[..4] != MAGIC {
        return Err(bad("missing matrix header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != DTYPE_F64 {
        return Err(bad("unsupported matrix dtype"));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let end = HEADER_LEN + 8 * rows * cols;
    if bytes.len() < end {
        return Err(bad("truncated matrix payload"));
    }
    let data = bytes[HEADER_LEN..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect::<Vec<_>>();
    Ok((DMatrix::from_vec(rows, cols, data), end))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    atomic_write(path, &encode_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path)?;
    let (m, used) = decode_matrix(&bytes)?;
    if used != bytes.len() {
        return Err(HarnessError::Format(format!("{}: trailing bytes after matrix", path.display())));
    }
    Ok(m)
}

/// Concatenated matrix blocks.
pub fn encode_blocks(blocks: &[&DMatrix<f64>]) -> Vec<u8> {
    blocks.iter().flat_map(|m| encode_matrix(m)).collect()
}

pub fn decode_blocks(bytes: &[u8]) -> Result<Vec<DMatrix<f64>>> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let (m, used) = decode_matrix(&bytes[at..])?;
        out.push(m);
        at += used;
    }
    Ok(out)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Renders rows as CSV in memory.
pub fn csv_bytes<I, R>(header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| HarnessError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_roundtrip_is_bitwise() {
        let m = DMatrix::from_fn(3, 5, |r, c| (r as f64 + 0.1) / (c as f64 - 2.5) * 1e-300_f64.max(1e-7));
        let bytes = encode_matrix(&m);
        assert_eq!(bytes.len(), 16 + 8 * 15);
        assert_eq!(&bytes[..4], b"TLMX");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
        let (back, used) = decode_matrix(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, m);
        // column-major payload
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), m[(1, 0)]);
    }

    #[test]
    fn blocks_roundtrip() {
        let a = DMatrix::from_element(2, 2, 1.5);
        let b = DMatrix::from_element(0, 3, 0.0);
        let c = DMatrix::from_fn(4, 1, |r, _| -(r as f64));
        let back = decode_blocks(&encode_blocks(&[&a, &b, &c])).unwrap();
        assert_eq!(back, vec![a, b, c]);
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let m = DMatrix::from_element(2, 2, 1.0);
        let mut bytes = encode_matrix(&m);
        assert!(decode_matrix(&bytes[..20]).is_err());
        bytes[0] = b'X';
        assert!(decode_matrix(&bytes).is_err());
        let mut bytes = encode_matrix(&m);
        bytes[4] = 9;
        assert!(decode_matrix(&bytes).is_err());
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.bin");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
        assert_eq!(sha256_hex(b"two"), sha256_file(&p).unwrap());
    }
}
