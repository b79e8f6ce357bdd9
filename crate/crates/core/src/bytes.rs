//! Little-endian readers and writers shared by the binary file formats.

use crate::error::{Error, Result};

/// Cursor over an in-memory buffer that reports the byte offset of any
/// truncation or malformed field.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::data_at(
                self.offset(),
                format!(
                    "truncated input: need {len} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            )),
        }
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.offset();
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::data_at(
                at,
                format!(
                    "bad magic {:?}, expected \"{}\"",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let at = self.offset();
        let v = self.u32()?;
        if v != expected {
            return Err(Error::data_at(
                at,
                format!("unsupported version {v}, expected {expected}"),
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let b = self.take(count.checked_mul(4).ok_or_else(|| {
            Error::data_at(self.offset(), "element count overflows")
        })?)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let b = self.take(count.checked_mul(8).ok_or_else(|| {
            Error::data_at(self.offset(), "element count overflows")
        })?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    out.reserve(vs.len() * 4);
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    out.reserve(vs.len() * 8);
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}
