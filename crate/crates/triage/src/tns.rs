//! TNS1: `b"TNS1"`, `u32` LE rank, `rank` `u32` LE dims, then row-major
//! `f32` LE data.

use std::path::Path;

use mcunet_core::Tensor;

use crate::error::{Result, TriageError};

pub const MAGIC: &[u8; 4] = b"TNS1";

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |what: &str| TriageError::data(format!("TNS1: {what}"));
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing magic"));
    }
    let word = |i: usize| -> Result<u32> {
        bytes.get(i..i + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).ok_or_else(|| bad("truncated header"))
    };
    let rank = word(4)? as usize;
    if rank == 0 || rank > 8 {
        return Err(bad(&format!("unsupported rank {rank}")));
    }
    let shape = (0..rank).map(|i| word(8 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 8 + 4 * rank;
    let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
    let body = &bytes[start..];
    if body.len() != len * 4 {
        return Err(bad(&format!("expected {} data bytes for {shape:?}, found {}", len * 4, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| TriageError::io(path, e))?;
    decode(&bytes).map_err(|e| TriageError::data(format!("{}: {e}", path.display())))
}

pub fn write(path: &Path, t: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| TriageError::io(path, e))
}
