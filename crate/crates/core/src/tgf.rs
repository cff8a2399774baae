//! `TGF1` field files.
//!
//! Layout (all integers `u32` little-endian):
//!
//! ```text
//! "TGF1" | version = 1 | d | shape[0..d] (x, y[, z]) | channels | f32 LE payload
//! ```
//!
//! The payload is channel-major, then `z, y, x` with `x` fastest, i.e. the
//! in-memory order of [`GridField`].

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::GridField;

pub const MAGIC: &[u8; 4] = b"TGF1";
pub const VERSION: u32 = 1;

pub fn encode(field: &GridField) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * field.dim() + 4 * field.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(field.dim() as u32).to_le_bytes());
    for &n in field.shape() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out.extend_from_slice(&(field.channels() as u32).to_le_bytes());
    for v in field.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<GridField> {
    let mut r = bytes;
    let mut word = || -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::format(origin, "truncated header"))?;
        Ok(u32::from_le_bytes(b))
    };
    let magic = word()?.to_le_bytes();
    if &magic != MAGIC {
        return Err(Error::format(origin, "bad magic"));
    }
    let version = word()?;
    if version != VERSION {
        return Err(Error::format(
            origin,
            format!("unsupported version {version}"),
        ));
    }
    let d = word()? as usize;
    if d != 2 && d != 3 {
        return Err(Error::format(origin, format!("unsupported dimension {d}")));
    }
    let mut shape = Vec::with_capacity(d);
    for _ in 0..d {
        shape.push(word()? as usize);
    }
    let channels = word()? as usize;
    let header = 4 * (4 + d);
    let n = shape.iter().product::<usize>() * channels;
    let payload = &bytes[header..];
    if payload.len() != 4 * n {
        return Err(Error::format(
            origin,
            format!("payload has {} bytes, expected {}", payload.len(), 4 * n),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    GridField::from_data(&shape, channels, data).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn write(path: &Path, field: &GridField) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(field)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<GridField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
