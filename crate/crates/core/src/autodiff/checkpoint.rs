//! Flat binary weight files.
//!
//! Layout: the 5-byte magic `JDLW1`, then records until end of file. Each record
//! is `name_len: u64`, the UTF-8 name, `rank: u64`, `rank` dims as `u64`, then
//! `prod(dims)` values as `f64`. All integers and floats are little-endian.

use std::io::{Read, Write};

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"JDLW1";

pub fn write_weights<W: Write>(mut w: W, tensors: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u64).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.data.len() * 8);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u64(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let end = *pos + 8;
    let chunk = bytes.get(*pos..end).ok_or_else(|| Error::BadCheckpoint("truncated record".into()))?;
    *pos = end;
    Ok(u64::from_le_bytes(chunk.try_into().expect("8 bytes")))
}

pub fn read_weights<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.get(..5) != Some(MAGIC.as_slice()) {
        return Err(Error::BadCheckpoint("missing JDLW1 magic".into()));
    }
    let mut pos = 5;
    let mut out = Vec::new();
    while pos < bytes.len() {
        let len = read_u64(&bytes, &mut pos)? as usize;
        let name_bytes = bytes.get(pos..pos + len).ok_or_else(|| Error::BadCheckpoint("truncated name".into()))?;
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| Error::BadCheckpoint("name is not UTF-8".into()))?;
        pos += len;
        let rank = read_u64(&bytes, &mut pos)? as usize;
        if rank > 16 {
            return Err(Error::BadCheckpoint(format!("rank {rank} for {name}")));
        }
        let shape = (0..rank).map(|_| read_u64(&bytes, &mut pos).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = numel(&shape);
        let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| Error::BadCheckpoint(format!("truncated data for {name}")))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        pos += 8 * n;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
