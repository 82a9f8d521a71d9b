//! `CSCT` binary tensor format: magic, version, dtype, ndim, u64 dims, then
//! the raw row-major little-endian payload.

use std::io::{Read, Write};

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"CSCT";
pub const TENSOR_VERSION: u8 = 1;

/// A tensor of either supported element type.
#[derive(Clone, Debug, PartialEq)]
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
}

pub fn write_tensor<T: Scalar, W: Write>(out: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 32 + t.numel() * T::DTYPE.size());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(TENSOR_VERSION);
    buf.push(T::DTYPE.code());
    buf.push(4);
    for d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads one tensor, tracking the byte offset for error reports. Tensors of
/// rank below 4 are padded with leading unit dimensions.
pub fn read_tensor<R: Read>(input: &mut R, base_offset: usize) -> Result<AnyTensor> {
    let mut reader = Counting {
        inner: input,
        offset: base_offset,
    };
    let mut magic = [0u8; 4];
    reader.exact(&mut magic, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format(reader.offset - 4, "bad tensor magic"));
    }
    let mut head = [0u8; 3];
    reader.exact(&mut head, "header")?;
    if head[0] != TENSOR_VERSION {
        return Err(Error::format(
            reader.offset - 3,
            format!("unsupported tensor version {}", head[0]),
        ));
    }
    let dtype = DType::from_code(head[1]).ok_or_else(|| {
        Error::format(reader.offset - 2, format!("unknown dtype code {}", head[1]))
    })?;
    let ndim = head[2] as usize;
    if ndim > 4 {
        return Err(Error::format(
            reader.offset - 1,
            format!("rank {ndim} exceeds 4"),
        ));
    }
    let mut shape = [1usize; 4];
    for i in 0..ndim {
        let mut d = [0u8; 8];
        reader.exact(&mut d, "dims")?;
        let dim = usize::try_from(u64::from_le_bytes(d))
            .map_err(|_| Error::format(reader.offset - 8, "dimension overflows usize"))?;
        shape[4 - ndim + i] = dim;
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(reader.offset, "element count overflows"))?;
    let mut payload = vec![0u8; numel * dtype.size()];
    reader.exact(&mut payload, "payload")?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode(shape, &payload)?),
        DType::F64 => AnyTensor::F64(decode(shape, &payload)?),
    })
}

/// Reads one tensor and requires its stored dtype to be `T`.
pub fn read_tensor_as<T: Scalar, R: Read>(input: &mut R, base_offset: usize) -> Result<Tensor<T>> {
    let any = read_tensor(input, base_offset)?;
    let found = any.dtype();
    let out: Option<Tensor<T>> = match any {
        AnyTensor::F32(t) if T::DTYPE == DType::F32 => Some(t.cast()),
        AnyTensor::F64(t) if T::DTYPE == DType::F64 => Some(t.cast()),
        _ => None,
    };
    out.ok_or_else(|| {
        Error::format(
            base_offset + 5,
            format!("expected dtype {:?}, found {found:?}", T::DTYPE),
        )
    })
}

fn decode<T: Scalar>(shape: [usize; 4], payload: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    Tensor::new(shape, payload.chunks_exact(size).map(T::read_le).collect())
}

struct Counting<'a, R> {
    inner: &'a mut R,
    offset: usize,
}

impl<R: Read> Counting<'_, R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::format(
                        self.offset + filled,
                        format!(
                            "truncated tensor {what}: wanted {} bytes, got {filled}",
                            buf.len()
                        ),
                    ))
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += filled;
        Ok(())
    }
}
