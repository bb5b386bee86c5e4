//! `PFT1` tensor files: magic `PFT1`, rank as u32 LE, each extent as u32 LE,
//! then the row-major data as f32 LE.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::DenseTensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PFT1";

pub fn write_tensor<W: Write>(t: &DenseTensor, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn save_tensor(t: &DenseTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if t.shape().iter().any(|&e| e > u32::MAX as usize) {
        return Err(Error::Shape(format!("extent too large for PFT1: {:?}", t.shape())));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor(t, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor. `label` is used in error messages.
pub fn read_tensor<R: Read>(mut r: R, label: &Path) -> Result<DenseTensor> {
    let fmt = |reason: String| Error::Format {
        path: label.to_path_buf(),
        reason,
    };
    let io = |e: std::io::Error| Error::io(label, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(fmt(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(&mut r).map_err(io)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(&mut r).map_err(io)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| fmt("element count overflows".into()))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| fmt(format!("truncated data: {e}")))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io)? != 0 {
        return Err(fmt("trailing bytes after data".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    DenseTensor::new(shape, data).map_err(|e| fmt(e.to_string()))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(BufReader::new(file), path)
}
