//! The repo-wide LTT1 tensor file format.
//!
//! Layout: 4 ASCII magic bytes `LTT1`; 1 unsigned byte rank; rank little-
//! endian `u32` dimensions; payload of little-endian IEEE-754 `f32`,
//! row-major. Round-trips are bit-exact: every `f32` survives the widen
//! to `f64` and back unchanged.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LTT1";

/// Serialize a tensor. `data` is truncated from `f64` to `f32` per the
/// repo-wide payload convention.
fn element_count(dims: &[u32]) -> Result<u64> {
    dims.iter()
        .try_fold(1u64, |acc, d| acc.checked_mul(*d as u64))
        .ok_or_else(|| Error::MalformedTensor(format!("dimension product overflows: {dims:?}")))
}

pub fn encode(dims: &[u32], data: &[f64]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "tensor rank must be in 1..=255, got {}",
            dims.len()
        )));
    }
    let expect = element_count(dims)?;
    if expect != data.len() as u64 {
        return Err(Error::ShapeMismatch(format!(
            "payload length {} does not match dimensions {:?} (product {})",
            data.len(),
            dims,
            expect
        )));
    }
    let mut out = Vec::with_capacity(5 + dims.len() * 4 + data.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parse an LTT1 byte stream into (dimensions, payload widened to `f64`).
pub fn decode(bytes: &[u8]) -> Result<(Vec<u32>, Vec<f64>)> {
    if bytes.len() < 5 {
        return Err(Error::MalformedTensor(format!(
            "file too short ({} bytes)",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::MalformedTensor(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[0..4],
            MAGIC
        )));
    }
    let rank = bytes[4] as usize;
    if rank == 0 {
        return Err(Error::MalformedTensor("rank must be >= 1".into()));
    }
    let header_len = 5 + rank * 4;
    if bytes.len() < header_len {
        return Err(Error::MalformedTensor(format!(
            "truncated header: {} bytes for rank {rank}",
            bytes.len()
        )));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 5 + i * 4;
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    let count = element_count(&dims)?;
    let expect_len = count
        .checked_mul(4)
        .and_then(|payload| payload.checked_add(header_len as u64))
        .ok_or_else(|| Error::MalformedTensor(format!("dimensions too large: {dims:?}")))?;
    if bytes.len() as u64 != expect_len {
        return Err(Error::MalformedTensor(format!(
            "payload length mismatch: file has {} bytes, dims {:?} require {}",
            bytes.len(),
            dims,
            expect_len
        )));
    }
    let mut data = Vec::with_capacity(count as usize);
    for i in 0..count as usize {
        let off = header_len + i * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Ok((dims, data))
}

pub fn write_file(path: &Path, dims: &[u32], data: &[f64]) -> Result<()> {
    fs::write(path, encode(dims, data)?)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<(Vec<u32>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingPayload(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    decode(&bytes).map_err(|e| match e {
        Error::MalformedTensor(msg) => Error::MalformedTensor(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Round an `f64` through `f32`, the precision that survives an LTT1 write.
pub fn quantize(v: f64) -> f64 {
    v as f32 as f64
}
