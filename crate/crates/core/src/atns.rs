//! The ATNS raw tensor format.
//!
//! Layout: magic `ATNS`, version `0x01`, dtype byte (`0x01` binary32,
//! `0x02` binary64), rank as `u16` LE, `rank` extents as `u32` LE, then the
//! row-major payload in little-endian order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ATNS";
pub const VERSION: u8 = 0x01;

pub fn encode<S: Scalar>(t: &Tensor<S>) -> Result<Vec<u8>> {
    let rank = u16::try_from(t.rank())
        .map_err(|_| Error::Format(format!("rank {} exceeds u16", t.rank())))?;
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + S::DTYPE.size() * t.numel());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(S::DTYPE.code());
    out.extend_from_slice(&rank.to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    if bytes.len() < 8 || bytes[..4] != MAGIC {
        return Err(Error::Format("missing ATNS magic bytes".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported ATNS version {:#04x}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype byte {:#04x}", bytes[5])))?;
    if dtype != S::DTYPE {
        return Err(Error::Format(format!(
            "file holds {dtype:?}, requested {:?}",
            S::DTYPE
        )));
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated ATNS header".into()));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != numel * dtype.size() {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            numel * dtype.size()
        )));
    }
    let data = payload.chunks_exact(dtype.size()).map(S::read_le).collect();
    Tensor::new(shape, data)
}

/// Decodes either dtype and converts to `S`.
pub fn decode_as<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    match bytes.get(5).copied().and_then(DType::from_code) {
        Some(DType::F32) if bytes[..4] == MAGIC => Ok(decode::<f32>(bytes)?.cast()),
        Some(DType::F64) if bytes[..4] == MAGIC => Ok(decode::<f64>(bytes)?.cast()),
        _ => decode(bytes),
    }
}

pub fn write<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn read<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    decode(&fs::read(path)?)
}
