//! `MDT1` tensor files: magic, little-endian `u32` rank, `u32` dims, then the
//! row-major `f32` little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MDT_MAGIC: &[u8; 4] = b"MDT1";

pub fn write_mdt<W: Write>(w: &mut W, t: &Tensor<f32>) -> Result<()> {
    w.write_all(MDT_MAGIC)?;
    w.write_all(&(t.dims().len() as u32).to_le_bytes())?;
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated MDT1 header".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_mdt<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated MDT1 magic".into()))?;
    if &magic != MDT_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let ndim = read_u32(r)? as usize;
    if ndim > 16 {
        return Err(Error::Format(format!("implausible rank {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u32(r)? as usize);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format("truncated MDT1 payload".into()))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_mdt_file(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_mdt(&mut w, t)?;
    w.flush()?;
    Ok(())
}

/// Reads a single tensor and rejects trailing bytes.
pub fn read_mdt_file(path: &Path) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_mdt(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    Ok(t)
}
