//! `DTNS` tensor records.
//!
//! Layout, all little-endian: the four magic bytes `DTNS`, `u32` version
//! (= 1), `u32` rank, `rank` × `u64` extents, then the `f64` payload.

use std::io::{Read, Write};
use std::path::Path;

use super::error::{Result, TensorError};
use super::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DTNS";
pub const VERSION: u32 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.shape().len() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_to(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&encode(t))
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
    if buf.len() < n {
        return Err(format!("truncated {what}"));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

/// Decodes one record from the front of `buf`, advancing it.
pub fn decode_from(buf: &mut &[u8]) -> std::result::Result<Tensor, String> {
    let magic = take(buf, 4, "magic")?;
    if magic != MAGIC {
        return Err(format!("bad magic bytes {magic:?}"));
    }
    let version = u32::from_le_bytes(take(buf, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let rank = u32::from_le_bytes(take(buf, 4, "rank")?.try_into().unwrap()) as usize;
    if rank == 0 || rank > 16 {
        return Err(format!("invalid rank {rank}"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(take(buf, 8, "extent")?.try_into().unwrap()) as usize);
    }
    let n: usize = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("extent overflow")?;
    let payload = take(buf, n.checked_mul(8).ok_or("extent overflow")?, "payload")?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(data, &shape).map_err(|e| e.to_string())
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut buf = bytes;
    let t = decode_from(&mut buf)?;
    if !buf.is_empty() {
        return Err(format!("{} trailing bytes", buf.len()));
    }
    Ok(t)
}

/// Writes to a temporary sibling then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode(t))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| TensorError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
    decode(&bytes).map_err(|msg| TensorError::Format {
        path: path.display().to_string(),
        msg,
    })
}
