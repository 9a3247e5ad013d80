//! Binary tensor files: `b"TNOT"`, version `0x01`, dtype byte, ndim byte,
//! `ndim` little-endian `u64` extents, then the row-major little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNOT";
const VERSION: u8 = 0x01;

/// A tensor of either element type, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested element type.
    pub fn into_dtype<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_tensor<T: Scalar, W: Write>(tensor: &Tensor<T>, mut w: W) -> Result<()> {
    let ndim = u8::try_from(tensor.ndim())
        .map_err(|_| Error::Format(format!("too many dimensions: {}", tensor.ndim())))?;
    let mut buf = Vec::with_capacity(8 + 8 * tensor.ndim() + tensor.numel() * T::DTYPE.size());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(T::DTYPE.code());
    buf.push(ndim);
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in tensor.data() {
        x.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

fn decode<T: Scalar>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let data = payload
        .chunks_exact(T::DTYPE.size())
        .map(T::read_le)
        .collect();
    Tensor::new(&shape, data)
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[5])))?;
    let ndim = bytes[6] as usize;
    let header = 7 + 8 * ndim;
    if bytes.len() < header {
        return Err(Error::Format("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("extent overflow".into()))?;
    let payload = &bytes[header..];
    if payload.len() != numel * dtype.size() {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            payload.len(),
            numel * dtype.size()
        )));
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode(shape, payload)?),
        DType::F64 => AnyTensor::F64(decode(shape, payload)?),
    })
}

pub fn write_tensor_file<T: Scalar>(tensor: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(tensor, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    read_tensor(fs::File::open(path)?)
}
