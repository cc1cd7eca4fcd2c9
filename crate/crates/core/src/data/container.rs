//! Tensor container: 8-byte magic, u32 version, u8 dtype tag, u32 rank,
//! u64 dimensions, then the little-endian payload.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::Grid;
use crate::scalar::Real;

pub const TENSOR_MAGIC: &[u8; 8] = b"CTSQTNSR";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 0,
    F32 = 1,
    /// Bytes `k` standing for the real `k / 255`.
    U8 = 2,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Self::F64),
            1 => Ok(Self::F32),
            2 => Ok(Self::U8),
            _ => Err(Error::Format(format!("unknown dtype tag {tag}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Self::F64 => 8,
            Self::F32 => 4,
            Self::U8 => 1,
        }
    }
}

/// A decoded container: its shape, element type and raw payload bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub payload: Vec<u8>,
}

impl RawTensor {
    pub fn to_grid<S: Real>(&self) -> Result<Grid<S>> {
        let values: Vec<S> = match self.dtype {
            DType::F64 => self
                .payload
                .chunks_exact(8)
                .map(|b| S::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect(),
            DType::F32 => self
                .payload
                .chunks_exact(4)
                .map(|b| S::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::U8 => self.payload.iter().map(|&k| S::lit(byte_to_unit(k))).collect(),
        };
        Grid::new(self.shape.clone(), values)
    }
}

pub fn byte_to_unit(k: u8) -> f64 {
    k as f64 / 255.0
}

pub fn write_tensor(mut w: impl Write, shape: &[usize], dtype: DType, payload: &[u8]) -> Result<()> {
    let n: usize = shape.iter().product();
    if payload.len() != n * dtype.width() {
        return Err(Error::Contract(format!(
            "payload of {} bytes for shape {shape:?}",
            payload.len()
        )));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[dtype as u8])?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(payload)?;
    Ok(())
}

pub fn write_grid<S: Real>(w: impl Write, grid: &Grid<S>) -> Result<()> {
    let payload: Vec<u8> = grid
        .values()
        .iter()
        .flat_map(|v| v.as_f64().to_le_bytes())
        .collect();
    write_tensor(w, grid.shape(), DType::F64, &payload)
}

pub fn read_tensor(mut r: impl Read) -> Result<RawTensor> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format("not a tensor container".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let dtype = DType::from_tag(tag[0])?;
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let bytes = shape
        .iter()
        .try_fold(dtype.width(), |acc: usize, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != bytes {
        return Err(Error::Format(format!(
            "tensor payload has {} bytes, expected {bytes}",
            payload.len()
        )));
    }
    Ok(RawTensor { shape, dtype, payload })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_every_dtype() {
        let g = Grid::new(vec![2, 3], vec![0.1, -2.5, 1e-300, 7.0, f64::MIN_POSITIVE, 3.25]).unwrap();
        let mut buf = Vec::new();
        write_grid(&mut buf, &g).unwrap();
        let raw = read_tensor(&buf[..]).unwrap();
        assert_eq!(raw.to_grid::<f64>().unwrap(), g);

        let bytes = vec![0u8, 17, 255, 128];
        let mut buf = Vec::new();
        write_tensor(&mut buf, &[4], DType::U8, &bytes).unwrap();
        let raw = read_tensor(&buf[..]).unwrap();
        assert_eq!(raw.payload, bytes);
        assert_eq!(raw.to_grid::<f64>().unwrap().values()[2], 1.0);

        let f: Vec<u8> = [1.5f32, -0.25].iter().flat_map(|v| v.to_le_bytes()).collect();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &[2], DType::F32, &f).unwrap();
        assert_eq!(read_tensor(&buf[..]).unwrap().to_grid::<f64>().unwrap().values(), &[1.5, -0.25]);
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &[3], DType::U8, &[1, 2, 3]).unwrap();
        assert!(read_tensor(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensor(&bad[..]).is_err());
        let mut bad = buf.clone();
        bad[12] = 9;
        assert!(read_tensor(&bad[..]).is_err());
        assert!(write_tensor(Vec::new(), &[2], DType::F64, &[0; 8]).is_err());
    }
}
