use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"POM1";
pub const VERSION: u32 = 1;

/// One serialized tensor: name, element type, shape and little-endian
/// payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// Layout, all integers little-endian:
///
/// ```text
/// "POM1" | u32 version | u64 step | u32 len, config text
/// u32 count | count x (u16 len, name | u8 dtype | u8 rank, u64 dims | u64 len, payload)
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    pub step: u64,
    /// Echo of the configuration that produced the tensors.
    pub config: String,
    pub tensors: Vec<StoredTensor>,
}

fn dtype_tag(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

impl Checkpoint {
    pub fn from_named<T: Scalar>(step: u64, config: impl Into<String>, named: &[(String, &Tensor<T>)]) -> Self {
        Checkpoint {
            step,
            config: config.into(),
            tensors: named
                .iter()
                .map(|(name, t)| StoredTensor {
                    name: name.clone(),
                    dtype: T::DTYPE,
                    shape: t.shape().to_vec(),
                    bytes: T::to_le_bytes_vec(t.data()),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(dtype_tag(t.dtype));
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a POM1 checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = match r.u8()? {
                0 => DType::F32,
                1 => DType::F64,
                other => return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {other}"))),
            };
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = r.u64()? as usize;
            let expected = shape.iter().product::<usize>() * dtype.size_of();
            if len != expected {
                return Err(Error::Checkpoint(format!(
                    "{name}: payload has {len} bytes, shape {shape:?} needs {expected}"
                )));
            }
            let bytes = r.take(len)?.to_vec();
            tensors.push(StoredTensor {
                name,
                dtype,
                shape,
                bytes,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { step, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("no tensor named {name:?}")))?;
        if t.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{name} is {}, requested {}",
                t.dtype.name(),
                T::DTYPE.name()
            )));
        }
        Tensor::new(t.shape.clone(), T::from_le_bytes_slice(&t.bytes))
    }

    /// Overwrite every named slot; names and shapes must match exactly.
    pub fn restore_into<T: Scalar>(&self, slots: Vec<(String, &mut Tensor<T>)>) -> Result<()> {
        if slots.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                slots.len()
            )));
        }
        for (name, slot) in slots {
            let t = self.tensor::<T>(&name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, model shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
