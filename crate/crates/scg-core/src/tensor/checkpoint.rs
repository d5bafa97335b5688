//! "SCGT" checkpoint files: named tensors with f32 little-endian payloads.
//!
//! Layout: magic `SCGT`, version u32, tensor count u32, then per tensor
//! the name (length u32 + UTF-8 bytes), rank u32, dims u32 each, and the
//! row-major f32 payload. All integers little-endian.

use super::Tensor;
use crate::error::{Result, ScgError};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SCGT";
pub const VERSION: u32 = 1;

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn write_f32_payload<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub(crate) fn read_f32_payload<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub(crate) fn check_magic<R: Read>(r: &mut R, expect: &[u8; 4], what: &str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != expect {
        return Err(ScgError::Format(format!(
            "{what}: bad magic {:?}, expected {:?}",
            m, expect
        )));
    }
    Ok(())
}

/// Write named tensors in checkpoint format. Values quantize to f32.
pub fn save(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, entries.len() as u32)?;
    for (name, t) in entries {
        let nb = name.as_bytes();
        write_u32(&mut w, nb.len() as u32)?;
        w.write_all(nb)?;
        write_u32(&mut w, t.shape().len() as u32)?;
        for &d in t.shape() {
            write_u32(&mut w, d as u32)?;
        }
        write_f32_payload(&mut w, t.data())?;
    }
    w.flush()?;
    Ok(())
}

/// Read the whole file into memory. Nothing outside the returned value is
/// mutated, so a failed load leaves callers untouched.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    check_magic(&mut r, MAGIC, "checkpoint")?;
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ScgError::Incompatible(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        let mut nb = vec![0u8; nlen];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb)
            .map_err(|e| ScgError::Format(format!("checkpoint: bad tensor name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let data = read_f32_payload(&mut r, n)?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Round an f64 buffer to the nearest f32 values in place. Saving quantizes
/// to f32; callers that need resume-exact training apply this to the live
/// state at save time so the continued run sees exactly the stored values.
pub fn quantize_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}
