//! The MTEN binary tensor format.
//!
//! Layout: magic `MTEN`, version byte 0x01, dtype byte (0 = f32, 1 = u8,
//! 2 = i32), ndim byte, then ndim little-endian u32 extents, then the
//! row-major little-endian payload. All on-disk tensors use this format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MTEN";
const VERSION: u8 = 0x01;

/// A decoded MTEN value, one variant per dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum MtenValue {
    F32(Tensor),
    U8 { shape: Vec<usize>, data: Vec<u8> },
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl MtenValue {
    pub fn shape(&self) -> &[usize] {
        match self {
            MtenValue::F32(t) => t.shape(),
            MtenValue::U8 { shape, .. } => shape,
            MtenValue::I32 { shape, .. } => shape,
        }
    }

    pub fn into_f32(self) -> Result<Tensor> {
        match self {
            MtenValue::F32(t) => Ok(t),
            other => Err(Error::data(format!(
                "expected f32 tensor, found dtype {:?}",
                dtype_byte(&other)
            ))),
        }
    }

    pub fn into_i32(self) -> Result<(Vec<usize>, Vec<i32>)> {
        match self {
            MtenValue::I32 { shape, data } => Ok((shape, data)),
            other => Err(Error::data(format!(
                "expected i32 tensor, found dtype {:?}",
                dtype_byte(&other)
            ))),
        }
    }

    pub fn into_u8(self) -> Result<(Vec<usize>, Vec<u8>)> {
        match self {
            MtenValue::U8 { shape, data } => Ok((shape, data)),
            other => Err(Error::data(format!(
                "expected u8 tensor, found dtype {:?}",
                dtype_byte(&other)
            ))),
        }
    }
}

fn dtype_byte(v: &MtenValue) -> u8 {
    match v {
        MtenValue::F32(_) => 0,
        MtenValue::U8 { .. } => 1,
        MtenValue::I32 { .. } => 2,
    }
}

pub fn encode(value: &MtenValue) -> Vec<u8> {
    let shape = value.shape();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype_byte(value));
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match value {
        MtenValue::F32(t) => {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        MtenValue::U8 { data, .. } => out.extend_from_slice(data),
        MtenValue::I32 { data, .. } => {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<MtenValue> {
    let mut r = bytes;
    let mut head = [0u8; 7];
    r.read_exact(&mut head)
        .map_err(|_| Error::data("MTEN header truncated"))?;
    if &head[0..4] != MAGIC {
        return Err(Error::data("bad MTEN magic"));
    }
    if head[4] != VERSION {
        return Err(Error::data(format!("unsupported MTEN version {}", head[4])));
    }
    let dtype = head[5];
    let ndim = head[6] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut e = [0u8; 4];
        r.read_exact(&mut e)
            .map_err(|_| Error::data("MTEN extents truncated"))?;
        shape.push(u32::from_le_bytes(e) as usize);
    }
    let n: usize = shape.iter().product();
    match dtype {
        0 => {
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)
                    .map_err(|_| Error::data("MTEN payload truncated"))?;
                data.push(f32::from_le_bytes(b));
            }
            Ok(MtenValue::F32(Tensor::new(shape, data)?))
        }
        1 => {
            let mut data = vec![0u8; n];
            r.read_exact(&mut data)
                .map_err(|_| Error::data("MTEN payload truncated"))?;
            Ok(MtenValue::U8 { shape, data })
        }
        2 => {
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)
                    .map_err(|_| Error::data("MTEN payload truncated"))?;
                data.push(i32::from_le_bytes(b));
            }
            Ok(MtenValue::I32 { shape, data })
        }
        d => Err(Error::data(format!("unknown MTEN dtype {}", d))),
    }
}

pub fn write(path: impl AsRef<Path>, value: &MtenValue) -> Result<()> {
    let bytes = encode(value);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<MtenValue> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

pub fn write_f32(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write(path, &MtenValue::F32(t.clone()))
}

pub fn read_f32(path: impl AsRef<Path>) -> Result<Tensor> {
    read(path)?.into_f32()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_fixed() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let bytes = encode(&MtenValue::F32(t));
        assert_eq!(&bytes[0..4], b"MTEN");
        assert_eq!(bytes[4], 0x01);
        assert_eq!(bytes[5], 0); // f32
        assert_eq!(bytes[6], 2); // ndim
        assert_eq!(&bytes[7..11], &2u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 15 + 6 * 4);
    }

    #[test]
    fn roundtrip_all_dtypes() {
        let f = MtenValue::F32(Tensor::new(vec![2, 2], vec![1.5, -2.0, 0.0, 3.25]).unwrap());
        let u = MtenValue::U8 {
            shape: vec![3],
            data: vec![0, 127, 255],
        };
        let i = MtenValue::I32 {
            shape: vec![2, 1],
            data: vec![-7, 40000],
        };
        for v in [f, u, i] {
            assert_eq!(decode(&encode(&v)).unwrap(), v);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode(&MtenValue::U8 {
            shape: vec![1],
            data: vec![0],
        });
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }
}
