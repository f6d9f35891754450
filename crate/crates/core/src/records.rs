//! Shared binary record encoding.
//!
//! All on-disk formats in this crate (checkpoints, memory banks, worlds) use
//! the same primitives: little-endian fixed-width integers, length-prefixed
//! UTF-8 strings, and named tensor records of the form
//!
//! ```text
//! name_len: u32 | name: UTF-8 | rank: u32 | dims: u32 each | values: f64 LE
//! ```

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::io::{Read, Write};

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn write_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

pub fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)?;
    Ok(buf[0])
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid UTF-8 string: {e}")))
}

pub fn write_magic<W: Write>(w: &mut W, magic: &[u8; 4]) -> Result<()> {
    w.write_all(magic)?;
    Ok(())
}

pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub fn write_values<S: Scalar, W: Write>(w: &mut W, values: &[S]) -> Result<()> {
    for v in values {
        write_f64(w, v.as_f64())?;
    }
    Ok(())
}

pub fn read_values<S: Scalar, R: Read>(r: &mut R, count: usize) -> Result<Vec<S>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(S::from_f64(read_f64(r)?));
    }
    Ok(out)
}

pub fn write_tensor_record<S: Scalar, W: Write>(
    w: &mut W,
    name: &str,
    tensor: &Tensor<S>,
) -> Result<()> {
    write_string(w, name)?;
    write_u32(w, tensor.rank() as u32)?;
    for &dim in tensor.shape() {
        write_u32(w, dim as u32)?;
    }
    write_values(w, tensor.data())
}

pub fn read_tensor_record<S: Scalar, R: Read>(r: &mut R) -> Result<(String, Tensor<S>)> {
    let name = read_string(r)?;
    let rank = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let values = read_values(r, numel)?;
    let tensor = Tensor::new(shape, values)
        .map_err(|e| Error::Format(format!("record '{name}': {e}")))?;
    Ok((name, tensor))
}
