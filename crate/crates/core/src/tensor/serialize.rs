//! Binary tensor container ("LATN" format).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "LATN"
//! version u32      currently 1
//! count   u32      number of tensors
//! entry*  count ×:
//!   name_len u32, name UTF-8 bytes
//!   rank     u32
//!   dims     rank × u64
//!   data     Π dims × f32
//! ```
//!
//! Values are stored as `f32` regardless of the compute precision; the f64
//! verification path is for gradient checking, not for checkpoints.

use crate::{Error, Result};
use std::io::{Read, Write};

pub const MAGIC: &[u8; 4] = b"LATN";
pub const VERSION: u32 = 1;

/// Upper bound on a single tensor's element count — a corrupt header must
/// not be able to trigger a huge allocation.
const MAX_NUMEL: u64 = 1 << 28;

pub fn write_tensors<W: Write>(
    mut w: W,
    entries: &[(&str, &[usize], &[f32])],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Format("too many tensors for container".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, shape, data) in entries {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("write_tensors", shape, data.len()));
        }
        let name_bytes = name.as_bytes();
        w.write_all(&u32::try_from(name_bytes.len()).map_err(|_| Error::Format("name too long".into()))?.to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&u32::try_from(shape.len()).unwrap().to_le_bytes())?;
        for &d in shape.iter() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        // One bulk write per tensor.
        let mut buf = Vec::with_capacity(data.len() * 4);
        for v in data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected {:02x?} (\"LATN\")",
            magic, MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}, expected {VERSION}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!("tensor name length {name_len} is implausible")));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor rank {rank} is implausible")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let mut db = [0u8; 8];
            r.read_exact(&mut db)?;
            let d = u64::from_le_bytes(db);
            numel = numel.saturating_mul(d.max(1));
            shape.push(d as usize);
        }
        if numel > MAX_NUMEL {
            return Err(Error::Format(format!("tensor \"{name}\" claims {numel} elements")));
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, shape, data));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
