//! Binary artifact formats.
//!
//! Parameter snapshots and chain dumps share one header scheme: 16 bytes
//! of magic (4), format version (u32), element count (u64), followed by
//! the payload as little-endian f64. Shape metadata for matrices lives in
//! the JSON sidecars written next to the dumps, not in the binary.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"BNNP";
pub const CHAIN_MAGIC: &[u8; 4] = b"BNNC";
pub const FORMAT_VERSION: u32 = 1;

fn write_payload(path: &Path, magic: &[u8; 4], data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + data.len() * 8);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_payload(path: &Path, magic: &[u8; 4]) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    let name = path.display().to_string();
    if bytes.len() < 16 {
        return Err(Error::Truncated { path: name, needed: 16, had: bytes.len() });
    }
    let found = u32::from_le_bytes(bytes[0..4].try_into().expect("sliced"));
    let expected = u32::from_le_bytes(*magic);
    if &bytes[0..4] != magic {
        return Err(Error::WrongMagic { path: name, found, expected });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("sliced"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { path: name, found: version });
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("sliced")) as usize;
    let needed = 16 + count * 8;
    if bytes.len() < needed {
        return Err(Error::Truncated { path: name, needed, had: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(Error::CountMismatch {
            path: name,
            detail: format!("header says {count} values but file has trailing bytes"),
        });
    }
    let mut out = Vec::with_capacity(count);
    for chunk in bytes[16..needed].chunks_exact(8) {
        out.push(f64::from_le_bytes(chunk.try_into().expect("chunked")));
    }
    Ok(out)
}

/// Write a flat parameter vector.
pub fn write_params(path: &Path, params: &[f64]) -> Result<()> {
    write_payload(path, PARAMS_MAGIC, params)
}

/// Read a flat parameter vector; `expect_len` guards callers that know
/// the network shape.
pub fn read_params(path: &Path, expect_len: Option<usize>) -> Result<Vec<f64>> {
    let data = read_payload(path, PARAMS_MAGIC)?;
    if let Some(n) = expect_len {
        if data.len() != n {
            return Err(Error::CountMismatch {
                path: path.display().to_string(),
                detail: format!("expected {n} params, file has {}", data.len()),
            });
        }
    }
    Ok(data)
}

/// Write a sample matrix (rows are draws) as a flat dump.
pub fn write_chain(path: &Path, samples: &Array2<f64>) -> Result<()> {
    let flat: Vec<f64> = samples.iter().copied().collect();
    write_payload(path, CHAIN_MAGIC, &flat)
}

/// Read a sample matrix dumped by [`write_chain`]; the column count
/// comes from the caller (diagnostics sidecar).
pub fn read_chain(path: &Path, dim: usize) -> Result<Array2<f64>> {
    let data = read_payload(path, CHAIN_MAGIC)?;
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::CountMismatch {
            path: path.display().to_string(),
            detail: format!("{} values do not form rows of width {dim}", data.len()),
        });
    }
    let rows = data.len() / dim;
    Array2::from_shape_vec((rows, dim), data)
        .map_err(|e| Error::shape("read_chain", e.to_string()))
}

/// f64 slice to base64 of its little-endian bytes.
pub fn floats_to_base64(data: &[f64]) -> String {
    use base64::Engine as _;
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// Inverse of [`floats_to_base64`].
pub fn base64_to_floats(s: &str) -> Result<Vec<f64>> {
    use base64::Engine as _;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Parse(format!("base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse(format!(
            "base64 payload of {} bytes is not a whole number of f64s",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunked")))
        .collect())
}
