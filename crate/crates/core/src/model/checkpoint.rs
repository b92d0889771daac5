//! Versioned named-tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "SPNRCKPT"
//! version      u32
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON (configuration echo)
//! count        u32
//! count × record:
//!   name_len   u16, name (UTF-8)
//!   dtype      u8        1 = f32, 2 = f64
//!   rank       u8
//!   dims       rank × u64
//!   values     product(dims) × dtype width, row-major
//! digest       32 bytes  SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"SPNRCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// A tensor in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_tensor<F: Scalar>(t: &Tensor<F>) -> Self {
        match F::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `F`; exact when the stored precision matches.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub records: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let count = u32::try_from(self.records.len()).map_err(|_| Error::Format("too many records".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, tensor) in &self.records {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.dtype().code());
            let shape = tensor.shape();
            let rank = u8::try_from(shape.len()).map_err(|_| Error::Format(format!("rank too large: {name}")))?;
            out.push(rank);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match tensor {
                StoredTensor::F32(t) => t.data().iter().for_each(|&v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|&v| v.write_le(&mut out)),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses an archive. Nothing is returned unless the whole input is
    /// well formed.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Version("not a checkpoint archive (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "archive format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(Error::Format("truncated archive".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checksum mismatch (truncated or corrupted archive)".into()));
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let header_len = r.u64()?;
        let header_bytes = r.take(usize::try_from(header_len).map_err(|_| r.truncated())?)?;
        let header: serde_json::Value =
            serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("header: {e}")))?;
        let count = r.u32()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_string();
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Format(format!("{name}: unknown dtype")))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| r.truncated())?;
                numel = numel.checked_mul(d).ok_or_else(|| Error::Format(format!("{name}: shape overflow")))?;
                shape.push(d);
            }
            let width = dtype.byte_width();
            let nbytes = numel.checked_mul(width).ok_or_else(|| Error::Format(format!("{name}: shape overflow")))?;
            let raw = r.take(nbytes)?;
            let tensor = match dtype {
                DType::F32 => StoredTensor::F32(Tensor::new(&shape, raw.chunks_exact(width).map(f32::read_le).collect())?),
                DType::F64 => StoredTensor::F64(Tensor::new(&shape, raw.chunks_exact(width).map(f64::read_le).collect())?),
            };
            records.push((name, tensor));
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes after the last record", body.len() - r.pos)));
        }
        Ok(Checkpoint { header, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn truncated(&self) -> Error {
        Error::Format(format!("truncated archive at byte {}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.truncated())?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
