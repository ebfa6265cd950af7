//! Self-describing binary container for named tensors.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "V1NCKPT\0"
//! version    u32       currently 1
//! meta_len   u32       length of the JSON metadata that follows
//! meta       meta_len  UTF-8 JSON object (free-form provenance)
//! count      u32       number of records
//! record × count:
//!   name_len u16, name (UTF-8)
//!   dtype    u8        1 = f32, 2 = f64
//!   rank     u8
//!   dims     u64 × rank
//!   payload  product(dims) × dtype size, little-endian IEEE-754
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"V1NCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn from_tensor<R: Real>(name: impl Into<String>, t: &Tensor<R>) -> Self {
        let payload = match R::DTYPE {
            DType::F32 => Payload::F32(t.data().iter().map(|v| v.to_f32().unwrap()).collect()),
            DType::F64 => Payload::F64(t.data().iter().map(|v| v.to_f64_lossy()).collect()),
        };
        Self { name: name.into(), shape: t.shape().to_vec(), payload }
    }

    pub fn dtype(&self) -> DType {
        match self.payload {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        }
    }

    /// Converts to `R`; exact when the stored dtype is `R`.
    pub fn to_tensor<R: Real>(&self) -> Result<Tensor<R>> {
        let data: Vec<R> = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| R::from_f32(x).unwrap()).collect(),
            Payload::F64(v) => v.iter().map(|&x| R::from_f64_lossy(x)).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, records: Vec::new() }
    }

    pub fn push<R: Real>(&mut self, name: impl Into<String>, t: &Tensor<R>) {
        self.records.push(Record::from_tensor(name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| Error::Checkpoint("metadata too large".into()))?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let name = r.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {}", r.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(match r.dtype() {
                DType::F32 => 1,
                DType::F64 => 2,
            });
            out.push(u8::try_from(r.shape.len()).map_err(|_| Error::Checkpoint("rank too large".into()))?);
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &r.payload {
                Payload::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                Payload::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = rd.u32()? as usize;
        let meta = serde_json::from_slice(rd.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = rd.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(rd.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(rd.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
            let dtype = match rd.take(1)?[0] {
                1 => DType::F32,
                2 => DType::F64,
                other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
            };
            let rank = rd.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(rd.take(8)?.try_into().unwrap()) as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
            let raw = rd.take(len.checked_mul(dtype.size()).ok_or_else(|| Error::Checkpoint("payload overflow".into()))?)?;
            let payload = match dtype {
                DType::F32 => Payload::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
                DType::F64 => Payload::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
            };
            records.push(Record { name, shape, payload });
        }
        if rd.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - rd.pos)));
        }
        Ok(Self { meta, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({"arch": "FF-1L"}));
        c.push("a", &Tensor::<f32>::from_fn(vec![2, 3], |i| i as f32 * 0.25));
        c.push("b/c", &Tensor::<f64>::from_fn(vec![4], |i| -(i as f64) / 3.0));
        c
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    }

    #[test]
    fn corrupted_header_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..64), name in "[a-z/_]{1,20}") {
            let n = values.len();
            let mut c = Checkpoint::new(serde_json::json!({"n": n}));
            c.push(name.clone(), &Tensor::new(vec![n], values.clone()).unwrap());
            c.push("f32", &Tensor::new(vec![1, n], values.iter().map(|&v| v as f32).collect()).unwrap());
            let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(&back, &c);
            let t: Tensor<f64> = back.get(&name).unwrap().to_tensor().unwrap();
            prop_assert_eq!(t.data(), values.as_slice());
        }
    }
}
