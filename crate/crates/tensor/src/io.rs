//! GTEN binary tensor format.
//!
//! Layout: `b"GTEN"`, version `u8` (1), dtype `u8` (0 = f32, 1 = f64),
//! rank `u8`, `rank` little-endian `u32` extents, then the values in
//! row-major little-endian order.

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const GTEN_MAGIC: &[u8; 4] = b"GTEN";
pub const GTEN_VERSION: u8 = 1;

pub fn write_gten<T: Real, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(TensorError::Format(format!("rank {} too large", t.rank())));
    }
    w.write_all(GTEN_MAGIC)?;
    w.write_all(&[GTEN_VERSION, T::DTYPE.code(), t.rank() as u8])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| TensorError::Format(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one tensor, converting to `T` if the stored dtype differs.
pub fn read_gten<T: Real, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head)?;
    if &head[..4] != GTEN_MAGIC {
        return Err(TensorError::Format("bad magic, expected GTEN".into()));
    }
    if head[4] != GTEN_VERSION {
        return Err(TensorError::Format(format!("unsupported GTEN version {}", head[4])));
    }
    let dtype = DType::from_code(head[5]).ok_or_else(|| TensorError::Format(format!("unknown dtype code {}", head[5])))?;
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * dtype.size()];
    r.read_exact(&mut bytes)?;
    let data: Vec<T> = match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
    };
    Tensor::new(shape, data)
}
