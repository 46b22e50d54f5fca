//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DYGT"  u32 version  u64 iteration
//! u32 config_len  config_len bytes of UTF-8 key=value text
//! u32 tensor_count
//! per tensor: u32 name_len, name, u8 dtype (0 f32, 1 f64, 2 u8),
//!             u8 rank, rank x u64 dims, payload
//! u32 CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DYGT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => TensorData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        NamedTensor {
            name: name.into(),
            dims: t.shape().iter().map(|&d| d as u64).collect(),
            data,
        }
    }

    pub fn bytes(name: impl Into<String>, b: Vec<u8>) -> Self {
        NamedTensor {
            name: name.into(),
            dims: vec![b.len() as u64],
            data: TensorData::U8(b),
        }
    }

    /// Convert to a float tensor of type `T`; the stored dtype must match.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let shape: Vec<usize> = self.dims.iter().map(|&d| d as usize).collect();
        let data: Vec<T> = match (&self.data, T::DTYPE) {
            (TensorData::F32(v), DType::F32) => {
                v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect()
            }
            (TensorData::F64(v), DType::F64) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has unexpected dtype",
                    self.name
                )))
            }
        };
        Tensor::from_vec(&shape, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.iteration.to_le_bytes());
        b.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            b.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            b.extend_from_slice(t.name.as_bytes());
            b.push(t.data.tag());
            b.push(t.dims.len() as u8);
            for d in &t.dims {
                b.extend_from_slice(&d.to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => b.extend_from_slice(v),
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 4 + 4 + 8 + 4 + 4 + 4 {
            return Err(bad("file too short (truncated?)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(bad("checksum mismatch (truncated or corrupted file)"));
        }
        let mut r = Reader { b: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let iteration = r.u64()?;
        let clen = r.u32()? as usize;
        let config = String::from_utf8(r.take(clen)?.to_vec())
            .map_err(|_| bad("config blob is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| bad("tensor name is not UTF-8"))?;
            let tag = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<u64>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d as usize))
                .ok_or_else(|| bad("dims overflow"))?;
            let data = match tag {
                0 => TensorData::F32(
                    r.take(n.checked_mul(4).ok_or_else(|| bad("dims overflow"))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => TensorData::F64(
                    r.take(n.checked_mul(8).ok_or_else(|| bad("dims overflow"))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => TensorData::U8(r.take(n)?.to_vec()),
                t => return Err(Error::Checkpoint(format!("unknown dtype tag {t}"))),
            };
            debug_assert_eq!(data.len(), n);
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes before checksum"));
        }
        Ok(Checkpoint {
            iteration,
            config,
            tensors,
        })
    }

    /// Write via a temporary file and rename, so an interrupted save never
    /// clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            iteration: 42,
            config: "strips=2\n".into(),
            tensors: vec![
                NamedTensor::from_tensor(
                    "w",
                    &Tensor::<f32>::from_vec(&[2, 2], vec![1.0, -0.5, 3.25, 1e-8]).unwrap(),
                ),
                NamedTensor::from_tensor("d", &Tensor::<f64>::from_vec(&[1], vec![0.1]).unwrap()),
                NamedTensor::bytes("rng", vec![1, 2, 3]),
            ],
        }
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"DYGT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 42);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 9);
        let n = b.len();
        assert_eq!(
            u32::from_le_bytes(b[n - 4..].try_into().unwrap()),
            crc32fast::hash(&b[..n - 4])
        );
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let b = sample().to_bytes();
        let c = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(c, sample());
        assert_eq!(c.to_bytes(), b);
        let w: Tensor<f32> = c.get("w").unwrap().to_tensor().unwrap();
        assert_eq!(w.data()[3], 1e-8);
        assert!(c.get("w").unwrap().to_tensor::<f64>().is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let b = sample().to_bytes();
        for cut in [1, 5, b.len() / 2, b.len() - 5] {
            let e = Checkpoint::from_bytes(&b[..cut]).unwrap_err();
            assert!(matches!(e, Error::Checkpoint(_)), "{e}");
        }
        let mut flipped = b.clone();
        flipped[30] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped)
            .unwrap_err()
            .to_string()
            .contains("checksum"));

        let mut v2 = b[..b.len() - 4].to_vec();
        v2[4] = 2;
        let crc = crc32fast::hash(&v2);
        v2.extend_from_slice(&crc.to_le_bytes());
        assert!(Checkpoint::from_bytes(&v2)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }
}
