//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "EPFLCKPT"            8 bytes
//! version u32                   currently 1
//! count   u32
//! entry*  name_len u32, name utf-8, dtype u8 (0 = f32, 1 = f64),
//!         trainable u8, rank u32, dims u64 * rank, values
//! sha256  32 bytes over everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::nn::ParamSet;
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EPFLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredValues {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub values: StoredValues,
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self.values {
            StoredValues::F32(_) => DType::F32,
            StoredValues::F64(_) => DType::F64,
        }
    }

    /// Converts to `T`; exact when the stored precision is `T`'s.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = match &self.values {
            StoredValues::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            StoredValues::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        };
        Tensor::new(&self.shape, data).expect("validated on decode")
    }
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn encode<T: Real>(entries: &[(&str, &Tensor<T>, bool)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor, trainable) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(u8::from(*trainable));
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<StoredTensor>> {
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return Err(bad("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| bad("entry name is not utf-8"))?
            .to_string();
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| bad(format!("{name}: bad dtype")))?;
        let trainable = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| bad("size overflow"))?)?;
        let values = match dtype {
            DType::F32 => StoredValues::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
            DType::F64 => StoredValues::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
        };
        entries.push(StoredTensor {
            name,
            trainable,
            shape,
            values,
        });
    }
    if r.pos != body.len() {
        return Err(bad(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(entries)
}

impl<T: Real> ParamSet<T> {
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let entries: Vec<(&str, &Tensor<T>, bool)> = self
            .iter()
            .map(|p| (p.name.as_str(), &p.tensor, p.trainable))
            .collect();
        encode(&entries)
    }

    /// Loads every entry of a checkpoint into matching parameters.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = decode(bytes)?;
        self.load(
            entries
                .iter()
                .map(|e| (e.name.clone(), e.to_tensor()))
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn restore(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.load_checkpoint(&bytes)
    }
}
