//! Little-endian binary helpers shared by the dataset and checkpoint formats.

use crate::error::{Error, Result};
use std::io::Write;

pub(crate) struct BinWriter<W: Write> {
    inner: W,
}

impl<W: Write> BinWriter<W> {
    pub(crate) fn new(inner: W) -> Self {
        Self { inner }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    pub(crate) fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 8);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }

    pub(crate) fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub(crate) struct BinReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    pub(crate) fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let s = &self.data[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::TruncatedPayload {
                expected: self.pos.saturating_add(len),
                found: self.data.len(),
            }),
        }
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let mut found = [0u8; 4];
        let avail = self.remaining().min(4);
        found[..avail].copy_from_slice(&self.data[self.pos..self.pos + avail]);
        if avail < 4 || found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        self.pos += 4;
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn bytes(&mut self, len: usize) -> Result<&'a [u8]> {
        self.take(len)
    }

    pub(crate) fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let len = count.checked_mul(8).ok_or(Error::TruncatedPayload {
            expected: usize::MAX,
            found: self.data.len(),
        })?;
        let b = self.take(len)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }
}

/// Converts a `u64` length field, rejecting values that overflow `usize`.
pub(crate) fn len_from_u64(v: u64, file_len: usize) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::TruncatedPayload {
        expected: usize::MAX,
        found: file_len,
    })
}
