//! `RTEN` files: magic, `u32` version, `u8` dtype code, `u8` rank, `u64`
//! dims, then the little-endian payload. Nothing may follow the payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RTEN";
pub const VERSION: u32 = 1;
pub const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum RawData {
    U8(Vec<u8>),
    I32(Vec<i32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl RawData {
    fn code(&self) -> u8 {
        match self {
            RawData::U8(_) => 0,
            RawData::I32(_) => 1,
            RawData::F32(_) => 2,
            RawData::F64(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RawData::U8(v) => v.len(),
            RawData::I32(v) => v.len(),
            RawData::F32(v) => v.len(),
            RawData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn elem_size(code: u8) -> Option<usize> {
    match code {
        0 => Some(1),
        1 | 2 => Some(4),
        3 => Some(8),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: RawData,
}

impl RawTensor {
    pub fn new(shape: Vec<usize>, data: RawData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.len() > MAX_RANK {
            return Err(Error::Shape(format!(
                "shape {shape:?} does not describe {} elements",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.shape.len() + self.data.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            RawData::U8(v) => out.extend_from_slice(v),
            RawData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RawData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RawData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |d: String| Error::format("raw tensor", d);
        if bytes.len() < 10 {
            return Err(err(format!("header truncated: {} of at least 10 bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(err(format!("bad magic {:?}, expected \"RTEN\"", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(err(format!("unsupported version {version}, expected {VERSION}")));
        }
        let code = bytes[8];
        let size = elem_size(code).ok_or_else(|| err(format!("unknown dtype code {code}")))?;
        let rank = bytes[9] as usize;
        if rank > MAX_RANK {
            return Err(err(format!("rank {rank} exceeds maximum {MAX_RANK}")));
        }
        let header = 10 + 8 * rank;
        if bytes.len() < header {
            return Err(err(format!(
                "dims truncated: expected {header} header bytes, found {}",
                bytes.len()
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for i in 0..rank {
            let d = u64::from_le_bytes(bytes[10 + 8 * i..18 + 8 * i].try_into().unwrap());
            let d = usize::try_from(d).map_err(|_| err(format!("dim {i} = {d} overflows")))?;
            count = count
                .checked_mul(d)
                .ok_or_else(|| err("element count overflows".into()))?;
            shape.push(d);
        }
        let expected = count
            .checked_mul(size)
            .ok_or_else(|| err("payload size overflows".into()))?;
        let actual = bytes.len() - header;
        if actual < expected {
            return Err(err(format!("payload truncated: expected {expected} bytes, found {actual}")));
        }
        if actual > expected {
            return Err(err(format!(
                "{} trailing bytes after {expected}-byte payload",
                actual - expected
            )));
        }
        let p = &bytes[header..];
        let data = match code {
            0 => RawData::U8(p.to_vec()),
            1 => RawData::I32(p.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            2 => RawData::F32(p.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => RawData::F64(p.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(Self { shape, data })
    }
}

pub fn write_raw_tensor(path: &Path, tensor: &RawTensor) -> Result<()> {
    std::fs::write(path, tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_raw_tensor(path: &Path) -> Result<RawTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    RawTensor::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_dim_round_trip() {
        let t = RawTensor::new(vec![3, 0, 2], RawData::F32(vec![])).unwrap();
        let b = t.to_bytes();
        assert_eq!(b.len(), 10 + 24);
        assert_eq!(RawTensor::from_bytes(&b).unwrap(), t);
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let t = RawTensor::new(vec![2, 2], RawData::F64(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let mut b = t.to_bytes();
        b.truncate(b.len() - 5);
        let msg = RawTensor::from_bytes(&b).unwrap_err().to_string();
        assert!(msg.contains("expected 32 bytes, found 27"), "{msg}");
    }

    #[test]
    fn bad_magic_rank_and_trailing() {
        let t = RawTensor::new(vec![1], RawData::U8(vec![7])).unwrap();
        let mut b = t.to_bytes();
        b[0] = b'X';
        assert!(RawTensor::from_bytes(&b).unwrap_err().to_string().contains("magic"));
        let mut b = t.to_bytes();
        b[9] = 40;
        assert!(RawTensor::from_bytes(&b).unwrap_err().to_string().contains("rank"));
        let mut b = t.to_bytes();
        b.push(0);
        assert!(RawTensor::from_bytes(&b).unwrap_err().to_string().contains("trailing"));
        let mut b = RawTensor::new(vec![1, 1], RawData::U8(vec![7])).unwrap().to_bytes();
        b[10..18].copy_from_slice(&u64::MAX.to_le_bytes());
        b[18..26].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(RawTensor::from_bytes(&b).unwrap_err().to_string().contains("overflow"));
    }

    proptest! {
        #[test]
        fn f32_round_trip_is_bitwise(v in proptest::collection::vec(any::<u32>(), 0..64)) {
            let data: Vec<f32> = v.iter().map(|&b| f32::from_bits(b)).collect();
            let t = RawTensor::new(vec![data.len()], RawData::F32(data)).unwrap();
            let back = RawTensor::from_bytes(&t.to_bytes()).unwrap();
            let (RawData::F32(a), RawData::F32(b)) = (&t.data, &back.data) else { unreachable!() };
            prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert_eq!(&t.shape, &back.shape);
        }
    }
}
