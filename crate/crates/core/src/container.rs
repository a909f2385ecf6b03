//! Raw array container shared by image stacks and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 8                | magic `SDDPMRAW`                          |
//! | 8                | `u64` length of the JSON header in bytes  |
//! | header length    | UTF-8 JSON header                         |
//! | rest             | contiguous `float32` payload              |
//!
//! The header is
//!
//! ```json
//! {
//!   "format": "speckle-ddpm/raw",
//!   "version": 1,
//!   "dtype": "float32",
//!   "endianness": "little",
//!   "arrays": [{"name": "slices", "shape": [n, h, w], "offset": 0, "len": n*h*w}],
//!   "meta": { ... }
//! }
//! ```
//!
//! `offset` and `len` count elements, not bytes, from the start of the payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SDDPMRAW";
pub const FORMAT: &str = "speckle-ddpm/raw";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dtype: String,
    endianness: String,
    arrays: Vec<ArrayEntry>,
    #[serde(default)]
    meta: Value,
}

/// A named array with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        NamedArray {
            name: name.into(),
            shape,
            data,
        }
    }
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn take(&mut self, name: &str) -> Option<NamedArray> {
        let i = self.arrays.iter().position(|a| a.name == name)?;
        Some(self.arrays.remove(i))
    }
}

pub fn encode(meta: &Value, arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for a in arrays {
        let expected: usize = a.shape.iter().product();
        if expected != a.data.len() {
            return Err(Error::Contract(format!(
                "array {} has {} elements but shape {:?}",
                a.name,
                a.data.len(),
                a.shape
            )));
        }
        entries.push(ArrayEntry {
            name: a.name.clone(),
            shape: a.shape.clone(),
            offset,
            len: a.data.len() as u64,
        });
        offset += a.data.len() as u64;
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        dtype: "float32".into(),
        endianness: "little".into(),
        arrays: entries,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Contract(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for a in arrays {
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Container> {
    let bad = |m: &str| Error::format(path, m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a speckle-ddpm raw container"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, e))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad("unsupported container format or version"));
    }
    if header.dtype != "float32" || header.endianness != "little" {
        return Err(bad("only little-endian float32 payloads are supported"));
    }
    let payload = &bytes[16 + hlen..];
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in header.arrays {
        let start = e.offset as usize * 4;
        let end = start + e.len as usize * 4;
        let raw = payload
            .get(start..end)
            .ok_or_else(|| Error::format(path, format!("array {} exceeds payload", e.name)))?;
        if e.shape.iter().product::<usize>() != e.len as usize {
            return Err(Error::format(path, format!("array {} shape/len mismatch", e.name)));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        arrays.push(NamedArray {
            name: e.name,
            shape: e.shape,
            data,
        });
    }
    Ok(Container {
        meta: header.meta,
        arrays,
    })
}

pub fn write(path: &Path, meta: &Value, arrays: &[NamedArray]) -> Result<()> {
    let bytes = encode(meta, arrays)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Container> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn roundtrip_bit_identical() {
        let arrays = vec![
            NamedArray::new("a", vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25]),
            NamedArray::new("b", vec![1], vec![0.1]),
        ];
        let meta = json!({"k": 1});
        let bytes = encode(&meta, &arrays).unwrap();
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.meta, meta);
        for (x, y) in arrays.iter().zip(&back.arrays) {
            assert_eq!(x.name, y.name);
            let xb: Vec<u32> = x.data.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"hello world, not a container", Path::new("x")).is_err());
        let bytes = encode(&Value::Null, &[NamedArray::new("a", vec![4], vec![0.0; 4])]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(encode(&Value::Null, &[NamedArray::new("a", vec![5], vec![0.0; 4])]).is_err());
    }
}
