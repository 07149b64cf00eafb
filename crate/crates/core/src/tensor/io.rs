//! EMT1 tensor files: magic `EMT1`, u8 dtype code, u32 rank, u32 dims, then
//! little-endian values. Dtype codes: 0 = f32, 1 = f64, 2 = u8.

use std::io::{Read, Write};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMT1";
pub const DTYPE_U8: u8 = 2;

fn header(dtype: u8, shape: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * shape.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

pub fn encoded_len(shape: &[usize], elem_size: usize) -> usize {
    9 + 4 * shape.len() + elem_size * shape.iter().product::<usize>()
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = header(T::DTYPE, t.shape());
    out.extend(T::to_le_bytes_vec(t.data()));
    out
}

pub fn encode_u8(shape: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = header(DTYPE_U8, shape);
    out.extend_from_slice(data);
    out
}

pub fn write_tensor<T: Real, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

/// Cursor over an in-memory buffer that reports absolute byte offsets in errors.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0, base: 0 }
    }

    pub fn with_base(buf: &'a [u8], base: u64) -> Self {
        Self { buf, pos: 0, base }
    }

    pub fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset(),
            message: message.into(),
        })
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!(
                "unexpected end of data: need {n} bytes, {} left",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn header(&mut self) -> Result<(u8, Vec<usize>)> {
        let at = self.offset();
        if self.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: at,
                message: "bad magic, expected EMT1".into(),
            });
        }
        let dtype = self.u8()?;
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return self.fail(format!("unsupported rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = self.u32()? as usize;
            if d == 0 {
                return self.fail("zero extent");
            }
            shape.push(d);
        }
        Ok((dtype, shape))
    }

    pub fn tensor<T: Real>(&mut self) -> Result<Tensor<T>> {
        let (dtype, shape) = self.header()?;
        let numel: usize = shape.iter().product();
        let data = match dtype {
            0 => f32::from_le_bytes_slice(self.take(numel * 4)?)
                .into_iter()
                .map(|v| T::from_f64(v as f64))
                .collect(),
            1 => f64::from_le_bytes_slice(self.take(numel * 8)?)
                .into_iter()
                .map(T::from_f64)
                .collect(),
            other => return self.fail(format!("dtype code {other} is not a real type")),
        };
        Tensor::new(&shape, data)
    }

    pub fn tensor_u8(&mut self) -> Result<(Vec<usize>, Vec<u8>)> {
        let (dtype, shape) = self.header()?;
        if dtype != DTYPE_U8 {
            return self.fail(format!("expected u8 tensor, found dtype code {dtype}"));
        }
        let numel: usize = shape.iter().product();
        Ok((shape, self.take(numel)?.to_vec()))
    }
}

pub fn read_tensor<T: Real, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut reader = Reader::new(&buf);
    let t = reader.tensor()?;
    if !reader.is_at_end() {
        return reader.fail("trailing bytes after tensor");
    }
    Ok(t)
}
