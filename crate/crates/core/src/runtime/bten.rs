//! Binary tensor batches: the magic `BTEN`, then little-endian `u32` count,
//! `u32` channels, `u16` height and `u16` width, then `count` tensors of
//! little-endian `f32` values in `[channel][row][col]` order.

use super::{RuntimeError, Tensor};
use crate::netir::TensorShape;

pub const BTEN_MAGIC: &[u8; 4] = b"BTEN";
const HEADER: usize = 16;

fn bad(msg: impl Into<String>) -> RuntimeError {
    RuntimeError::InvalidArgument(format!("BTEN: {}", msg.into()))
}

pub fn read_bten(bytes: &[u8]) -> Result<Vec<Tensor>, RuntimeError> {
    if bytes.len() < HEADER || &bytes[..4] != BTEN_MAGIC {
        return Err(bad("missing magic header"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let u16_at = |i: usize| u16::from_le_bytes(bytes[i..i + 2].try_into().expect("2 bytes")) as usize;
    let count = u32_at(4);
    let shape = TensorShape::new(u32_at(8), u16_at(12), u16_at(14));
    if !shape.is_valid() {
        return Err(bad(format!("invalid shape {shape}")));
    }
    let body = &bytes[HEADER..];
    if body.len() != count * shape.numel() * 4 {
        return Err(bad(format!(
            "expected {} payload bytes for {count} x {shape}, found {}",
            count * shape.numel() * 4,
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(shape.numel() * 4)
        .map(|t| {
            let data = t
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            Tensor::new(shape, data)
        })
        .collect())
}

/// Values are narrowed to `f32`. All tensors must share one shape.
pub fn write_bten(tensors: &[Tensor]) -> Result<Vec<u8>, RuntimeError> {
    let shape = tensors.first().map_or(TensorShape::vector(1), |t| t.shape);
    if tensors.iter().any(|t| t.shape != shape) {
        return Err(bad("tensors differ in shape"));
    }
    if shape.height > u16::MAX as usize || shape.width > u16::MAX as usize {
        return Err(bad("spatial size exceeds 65535"));
    }
    let mut out = Vec::with_capacity(HEADER + tensors.len() * shape.numel() * 4);
    out.extend_from_slice(BTEN_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    out.extend_from_slice(&(shape.channels as u32).to_le_bytes());
    out.extend_from_slice(&(shape.height as u16).to_le_bytes());
    out.extend_from_slice(&(shape.width as u16).to_le_bytes());
    for t in tensors {
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}
