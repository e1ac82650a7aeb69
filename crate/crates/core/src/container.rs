//! The PLNK tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"PLNK"
//! version u32            (currently 1)
//! count   u32
//! shapes  count × [u32; 3]
//! data    f32 values, row-major, tensors concatenated in order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PLNK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: [u32; 3],
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().map(|&d| d as usize).product()
    }
}

pub fn encode(tensors: &[StoredTensor]) -> Result<Vec<u8>> {
    let total: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut out = Vec::with_capacity(12 + 12 * tensors.len() + 4 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        if t.numel() != t.data.len() {
            return Err(Error::Shape(format!(
                "tensor shape {:?} does not match {} values",
                t.shape,
                t.data.len()
            )));
        }
        for d in t.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format("PLNK container truncated".into()));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn take_u32(buf: &mut &[u8]) -> Result<u32> {
    let b = take(buf, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn decode(mut buf: &[u8]) -> Result<Vec<StoredTensor>> {
    if take(&mut buf, 4)? != MAGIC {
        return Err(Error::Format("bad magic, expected PLNK".into()));
    }
    let version = take_u32(&mut buf)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported PLNK version {version} (expected {VERSION})"
        )));
    }
    let count = take_u32(&mut buf)? as usize;
    let mut shapes = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        shapes.push([take_u32(&mut buf)?, take_u32(&mut buf)?, take_u32(&mut buf)?]);
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n: usize = shape.iter().map(|&d| d as usize).product();
        let bytes = take(&mut buf, n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(StoredTensor { shape, data });
    }
    if !buf.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after PLNK data", buf.len())));
    }
    Ok(tensors)
}

pub fn write_file(path: impl AsRef<Path>, tensors: &[StoredTensor]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensors)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<StoredTensor>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
