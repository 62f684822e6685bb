//! `NMAP` binary tensor format: magic, four little-endian `u32` dims, then
//! N·C·H·W little-endian `f32` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NMAP";
const HEADER_LEN: usize = 4 + 16;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    write_to(t, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn write_to<T: Scalar, W: Write>(t: &Tensor<T>, w: &mut W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    for d in t.shape().dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Decodes one tensor from the start of `bytes`, returning it and the bytes consumed.
/// `source` and `base` are only used to locate errors.
pub fn decode_at<T: Scalar>(bytes: &[u8], source: &Path, base: u64) -> Result<(Tensor<T>, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::parse(source, base + bytes.len() as u64, "truncated NMAP header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::parse(source, base, "bad NMAP magic"));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 4 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if *d == 0 {
            return Err(Error::parse(source, base + off as u64, "zero-sized NMAP dimension"));
        }
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let need = HEADER_LEN + 4 * shape.numel();
    if bytes.len() < need {
        return Err(Error::parse(
            source,
            base + bytes.len() as u64,
            format!("NMAP payload truncated: need {need} bytes"),
        ));
    }
    let data = bytes[HEADER_LEN..need]
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Ok((Tensor::from_vec(shape, data)?, need))
}

pub fn decode<T: Scalar>(bytes: &[u8], source: &Path) -> Result<Tensor<T>> {
    let (t, used) = decode_at(bytes, source, 0)?;
    if used != bytes.len() {
        return Err(Error::parse(source, used as u64, "trailing bytes after NMAP payload"));
    }
    Ok(t)
}

pub fn save<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
    decode(&bytes, path)
}
