//! On-disk tensor format.
//!
//! `<stem>.bin` holds a little-endian header followed by the raw elements:
//!
//! | bytes | content                                  |
//! |-------|------------------------------------------|
//! | 4     | magic `PBVT`                             |
//! | 4     | dtype code (u32: 1 = f32, 2 = f64, 3 = i32) |
//! | 4     | rank (u32)                               |
//! | 8·rank| extents (u64 each)                       |
//! | ...   | elements, row-major                      |
//!
//! `<stem>.json` is a sidecar naming the tensor and repeating dtype/shape.
//! 8-bit binary PGM (`P5`) is supported for hand-made raster fixtures.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PBVT";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub schema_version: u32,
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
        DType::I32 => "i32",
    }
}

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

fn write_raw(path: &Path, name: &str, dtype: DType, shape: &[usize], payload: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * shape.len() + payload.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(dtype as u32).to_le_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.extend_from_slice(payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    let side = Sidecar {
        schema_version: SCHEMA_VERSION,
        name: name.to_string(),
        dtype: dtype_name(dtype).to_string(),
        shape: shape.to_vec(),
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&sp, e))
}

struct Raw {
    dtype: DType,
    shape: Vec<usize>,
    payload: Vec<u8>,
}

fn read_raw(path: &Path) -> Result<Raw> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing PBVT magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dtype = match u32_at(4) {
        1 => DType::F32,
        2 => DType::F64,
        3 => DType::I32,
        c => return Err(bad(&format!("unknown dtype code {c}"))),
    };
    let rank = u32_at(8) as usize;
    let head = 12 + 8 * rank;
    if bytes.len() < head {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let width = match dtype {
        DType::F64 => 8,
        DType::F32 | DType::I32 => 4,
    };
    let n: usize = shape.iter().product();
    if bytes.len() != head + n * width {
        return Err(bad(&format!("expected {} data bytes, found {}", n * width, bytes.len() - head)));
    }
    Ok(Raw {
        dtype,
        shape,
        payload: bytes[head..].to_vec(),
    })
}

/// Writes a real tensor in its own precision.
pub fn write_tensor<T: Scalar>(path: &Path, name: &str, t: &Tensor<T>) -> Result<()> {
    let mut payload = Vec::with_capacity(t.numel() * 8);
    match T::DTYPE {
        DType::F64 => t.data().iter().for_each(|v| payload.extend_from_slice(&v.f64().to_le_bytes())),
        _ => t.data().iter().for_each(|v| payload.extend_from_slice(&(v.f64() as f32).to_le_bytes())),
    }
    write_raw(path, name, T::DTYPE, t.shape(), &payload)
}

/// Reads a real tensor, converting from whatever dtype is stored.
pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let raw = read_raw(path)?;
    let vals: Vec<T> = match raw.dtype {
        DType::F64 => raw.payload.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
        DType::F32 => raw.payload.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
        DType::I32 => raw.payload.chunks_exact(4).map(|c| T::of(i32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
    };
    Tensor::new(&raw.shape, vals)
}

pub fn write_labels(path: &Path, name: &str, shape: &[usize], labels: &[i32]) -> Result<()> {
    if shape.iter().product::<usize>() != labels.len() {
        return Err(Error::dim("write_labels", shape, &[labels.len()]));
    }
    let payload: Vec<u8> = labels.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_raw(path, name, DType::I32, shape, &payload)
}

pub fn read_labels(path: &Path) -> Result<(Vec<usize>, Vec<i32>)> {
    let raw = read_raw(path)?;
    if raw.dtype != DType::I32 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "label raster must be i32".into(),
        });
    }
    let v = raw.payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((raw.shape, v))
}

pub fn read_sidecar(bin: &Path) -> Result<Sidecar> {
    let sp = sidecar_path(bin);
    let text = fs::read(&sp).map_err(|e| Error::io(&sp, e))?;
    Ok(serde_json::from_slice(&text)?)
}

/// Writes an 8-bit binary PGM, `rows × cols`, row-major.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if rows * cols != pixels.len() {
        return Err(Error::dim("write_pgm", &[rows, cols], &[pixels.len()]));
    }
    let mut buf = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit binary PGM; returns `(rows, cols, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    // header: magic, width, height, maxval separated by whitespace, comments allowed
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).to_string());
    }
    i += 1;
    if fields[0] != "P5" {
        return Err(bad("only binary P5 is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (cols, rows, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    if bytes.len() < i + rows * cols {
        return Err(bad("truncated pixel data"));
    }
    Ok((rows, cols, bytes[i..i + rows * cols].to_vec()))
}
