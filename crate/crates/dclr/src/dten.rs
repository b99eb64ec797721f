//! `DTEN` tensor files: the magic `DTEN`, a version byte (1), a rank byte,
//! one little-endian `u32` per extent, then the `f32` data little-endian in
//! row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use dclr_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DTEN";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::format("<tensor>", "rank exceeds 255"))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::format("<tensor>", format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |reason: String| Error::format(origin, reason);
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("not a DTEN file (bad magic)".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported DTEN version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated DTEN header".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let expected = n.and_then(|n| n.checked_mul(4)).and_then(|b| b.checked_add(header));
    if expected != Some(bytes.len()) {
        return Err(bad(format!("payload of {} bytes does not match shape {shape:?}", bytes.len() - header)));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode(t)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
