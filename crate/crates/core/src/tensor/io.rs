//! MDNT tensor container: magic `MDNT`, u8 dtype code (0 = f32, 1 = f64),
//! u8 ndim, ndim little-endian u64 extents, then the payload little-endian
//! row-major. The CLI uses it for fixtures.

use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MDNT";

/// Tensor of either element type, as read back from a file.
#[derive(Debug, Clone)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.dims(),
            DynTensor::F64(t) => t.dims(),
        }
    }

    /// Widen (or pass through) to f64; lossless for both element types.
    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.clone(),
        }
    }
}

pub fn write_mdnt<T: Scalar>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&[T::DTYPE.code()])?;
    let ndim = tensor.rank();
    if ndim > u8::MAX as usize {
        return Err(Error::ShapeMismatch(format!("rank {ndim} exceeds format limit")));
    }
    f.write_all(&[ndim as u8])?;
    for &d in tensor.dims() {
        f.write_all(&(d as u64).to_le_bytes())?;
    }
    match T::DTYPE {
        DType::F32 => {
            for &x in tensor.data() {
                f.write_all(&(x.to_f64() as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &x in tensor.data() {
                f.write_all(&x.to_f64().to_le_bytes())?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_mdnt(path: &Path) -> Result<DynTensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadTensorFile(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut head = [0u8; 2];
    f.read_exact(&mut head)?;
    let dtype = DType::from_code(head[0])
        .ok_or_else(|| Error::BadTensorFile(format!("unknown dtype code {}", head[0])))?;
    let ndim = head[1] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        f.read_exact(&mut b)?;
        dims.push(u64::from_le_bytes(b) as usize);
    }
    let len: usize = dims.iter().product();
    match dtype {
        DType::F32 => {
            let mut data = Vec::with_capacity(len);
            let mut b = [0u8; 4];
            for _ in 0..len {
                f.read_exact(&mut b)?;
                data.push(f32::from_le_bytes(b));
            }
            Ok(DynTensor::F32(Tensor::from_vec(&dims, data)?))
        }
        DType::F64 => {
            let mut data = Vec::with_capacity(len);
            let mut b = [0u8; 8];
            for _ in 0..len {
                f.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            Ok(DynTensor::F64(Tensor::from_vec(&dims, data)?))
        }
    }
}
