//! `RTEN` binary tensor files.
//!
//! Layout: magic `RTEN`, version byte (1), rank byte, `rank` little-endian
//! `u32` extents, then row-major little-endian `f32` values.

use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RTEN";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let fail = |m: &str| TensorError::Format(m.to_string());
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(TensorError::Format(format!("unsupported version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    if rank == 0 {
        return Err(fail("rank 0"));
    }
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(fail("truncated header"));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let body = &bytes[header..];
    if body.len() != numel * 4 {
        return Err(TensorError::Format(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            body.len(),
            numel * 4
        )));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(&shape, data).map_err(|e| TensorError::Format(e.to_string()))
}

pub fn write(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    if t.rank() > u8::MAX as usize || t.shape().iter().any(|&d| d > u32::MAX as usize) {
        return Err(TensorError::Format(format!("shape {:?} not representable", t.shape())));
    }
    fs::write(path, encode(t))?;
    Ok(())
}

/// Reads a file; format errors carry the offending path.
pub fn read(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        TensorError::Format(m) => TensorError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
