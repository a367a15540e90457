//! Dense tensors and the little-endian `.tensor` file format exchanged with
//! the runner.
//!
//! Layout: magic `KFTN`, dtype code (u8), rank (u8), `rank` dimensions as
//! u32, then the elements row-major. Bools take one byte each (0 or 1).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"KFTN";
pub const FILE_EXTENSION: &str = "tensor";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I32,
    I64,
    U8,
    Bool,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I32 => 1,
            DType::I64 => 2,
            DType::U8 => 3,
            DType::Bool => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => DType::F32,
            1 => DType::I32,
            2 => DType::I64,
            3 => DType::U8,
            4 => DType::Bool,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I64 => 8,
            DType::U8 | DType::Bool => 1,
        }
    }

    pub fn is_float(self) -> bool {
        self == DType::F32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    I64(Vec<i64>),
    U8(Vec<u8>),
    Bool(Vec<bool>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
            TensorData::I64(_) => DType::I64,
            TensorData::U8(_) => DType::U8,
            TensorData::Bool(_) => DType::Bool,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("truncated tensor: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after tensor data")]
    TrailingBytes(usize),
    #[error("bool element {index} has value {value}")]
    InvalidBool { index: usize, value: u8 },
    #[error("shape {shape:?} holds {expected} elements but data has {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("rank {0} exceeds 255")]
    RankTooLarge(usize),
    #[error("dimension {0} does not fit in u32")]
    DimTooLarge(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        let expected = element_count(&shape);
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if shape.len() > u8::MAX as usize {
            return Err(TensorError::RankTooLarge(shape.len()));
        }
        if let Some(&d) = shape.iter().find(|&&d| d > u32::MAX as usize) {
            return Err(TensorError::DimTooLarge(d));
        }
        Ok(Tensor { shape, data })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = self.dtype();
        let mut out = Vec::with_capacity(6 + 4 * self.shape.len() + dtype.size() * self.len());
        out.extend_from_slice(MAGIC);
        out.push(dtype.code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::Bool(v) => out.extend(v.iter().map(|&b| b as u8)),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let need = |needed: usize| {
            if bytes.len() < needed {
                Err(TensorError::Truncated {
                    needed,
                    have: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(6)?;
        if &bytes[..4] != MAGIC {
            return Err(TensorError::BadMagic);
        }
        let dtype = DType::from_code(bytes[4]).ok_or(TensorError::UnknownDType(bytes[4]))?;
        let rank = bytes[5] as usize;
        let header = 6 + 4 * rank;
        need(header)?;
        let shape: Vec<usize> = bytes[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count = element_count(&shape);
        let end = count
            .checked_mul(dtype.size())
            .and_then(|n| n.checked_add(header))
            .ok_or(TensorError::Truncated {
                needed: usize::MAX,
                have: bytes.len(),
            })?;
        need(end)?;
        if bytes.len() > end {
            return Err(TensorError::TrailingBytes(bytes.len() - end));
        }
        let body = &bytes[header..end];
        let data = match dtype {
            DType::F32 => TensorData::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                body.chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I64 => TensorData::I64(
                body.chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(body.to_vec()),
            DType::Bool => TensorData::Bool(
                body.iter()
                    .enumerate()
                    .map(|(index, &value)| match value {
                        0 => Ok(false),
                        1 => Ok(true),
                        _ => Err(TensorError::InvalidBool { index, value }),
                    })
                    .collect::<Result<_, _>>()?,
            ),
        };
        Ok(Tensor { shape, data })
    }

    pub fn read(path: &Path) -> Result<Self, TensorError> {
        let bytes = fs::read(path).map_err(|source| TensorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), TensorError> {
        fs::write(path, self.to_bytes()).map_err(|source| TensorError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Element count of `shape`; a rank-0 shape is a scalar.
pub fn element_count(shape: &[usize]) -> usize {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).unwrap_or(usize::MAX)
}

/// File name the runner uses for output `k`.
pub fn output_file_name(k: usize) -> String {
    format!("out_{k}.{FILE_EXTENSION}")
}
