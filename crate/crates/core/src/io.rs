//! On-disk binary formats: versioned checkpoints and raw array files.
//!
//! Array file layout (little-endian throughout):
//!   magic "OSFBIN01" | dtype u8 (1 = f64) | ndim u8 | dims u32 x ndim | data
//!
//! Checkpoint layout:
//!   magic "OSFCKPT1" | format version u32 | kind u8 | header length u32 |
//!   header JSON | parameter payload f64 x n
//!
//! Loaders reject wrong magics, format versions, and kinds.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const ARRAY_MAGIC: &[u8; 8] = b"OSFBIN01";
pub const CKPT_MAGIC: &[u8; 8] = b"OSFCKPT1";
pub const CKPT_VERSION: u32 = 1;

pub const KIND_FIELD: u8 = 1;
pub const KIND_DYNAMICS: u8 = 2;

pub fn write_f64_array(path: &Path, dims: &[u32], data: &[f64]) -> Result<()> {
    let count: usize = dims.iter().map(|d| *d as usize).product();
    if count != data.len() {
        return Err(Error::Data(format!(
            "array dims {:?} do not match {} values",
            dims,
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + dims.len() * 4 + data.len() * 8);
    out.extend_from_slice(ARRAY_MAGIC);
    out.push(1u8);
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_f64_array(path: &Path) -> Result<(Vec<u32>, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 10 || &bytes[..8] != ARRAY_MAGIC {
        return Err(Error::Data(format!("{}: not an array file", path.display())));
    }
    if bytes[8] != 1 {
        return Err(Error::Data("unsupported dtype".into()));
    }
    let ndim = bytes[9] as usize;
    let mut pos = 10;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()));
        pos += 4;
    }
    let count: usize = dims.iter().map(|d| *d as usize).product();
    if bytes.len() != pos + count * 8 {
        return Err(Error::Data(format!("{}: truncated array", path.display())));
    }
    let data = bytes[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

pub fn write_checkpoint(
    path: &Path,
    kind: u8,
    header: &serde_json::Value,
    params: &[f64],
) -> Result<()> {
    let hdr = serde_json::to_vec(header).map_err(|e| Error::Data(e.to_string()))?;
    let mut out = Vec::with_capacity(17 + hdr.len() + params.len() * 8);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&(hdr.len() as u32).to_le_bytes());
    out.extend_from_slice(&hdr);
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path, expect_kind: u8) -> Result<(serde_json::Value, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 17 || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::Data(format!("{}: not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Data(format!(
            "{}: checkpoint format v{version}, this build reads v{CKPT_VERSION}",
            path.display()
        )));
    }
    let kind = bytes[12];
    if kind != expect_kind {
        return Err(Error::Data(format!(
            "{}: checkpoint kind {kind}, expected {expect_kind}",
            path.display()
        )));
    }
    let hlen = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
    if bytes.len() < 17 + hlen {
        return Err(Error::Data("truncated checkpoint header".into()));
    }
    let header: serde_json::Value = serde_json::from_slice(&bytes[17..17 + hlen])
        .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let payload = &bytes[17 + hlen..];
    if payload.len() % 8 != 0 {
        return Err(Error::Data("truncated checkpoint payload".into()));
    }
    let params =
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, params))
}

/// Write a JSON report with stable field order (serde preserves struct
/// declaration order).
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    f.write_all(s.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
