//! Little-endian binary framing shared by the dataset, corpus, checkpoint,
//! embedding-store and index files.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Writer { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub fn u16(&mut self, v: u16) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn i64(&mut self, v: i64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32s(&mut self, vs: &[f32]) -> Result<()> {
        for v in vs {
            self.f32(*v)?;
        }
        Ok(())
    }

    pub fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        for v in vs {
            self.f64(*v)?;
        }
        Ok(())
    }

    /// `u32` length followed by UTF-8 bytes.
    pub fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Reader that tracks the byte offset and the current record for error
/// reporting.
pub struct Reader<R: Read> {
    inner: R,
    offset: u64,
    record: Option<u64>,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Reader {
            inner,
            offset: 0,
            record: None,
        }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn set_record(&mut self, record: Option<u64>) {
        self.record = record;
    }

    pub fn error(&self, reason: impl Into<String>) -> Error {
        Error::Decode {
            offset: self.offset,
            record: self.record,
            reason: reason.into(),
        }
    }

    pub fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        let mut filled = 0;
        while filled < N {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    let at = self.offset + filled as u64;
                    return Err(Error::Decode {
                        offset: at,
                        record: self.record,
                        reason: format!("unexpected end of file (needed {N} bytes)"),
                    });
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += N as u64;
        Ok(buf)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let start = self.offset;
        let got = self.bytes::<4>()?;
        if &got != expected {
            return Err(Error::Decode {
                offset: start,
                record: None,
                reason: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&got),
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.bytes()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| self.f32()).collect()
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self, max: usize) -> Result<String> {
        let len = self.u32()? as usize;
        if len > max {
            return Err(self.error(format!("string length {len} exceeds {max}")));
        }
        let mut buf = vec![0u8; len];
        for b in buf.iter_mut() {
            *b = self.u8()?;
        }
        String::from_utf8(buf).map_err(|_| self.error("invalid utf-8"))
    }

    /// Succeeds only if the stream is exhausted.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(()),
                Ok(_) => return Err(self.error("trailing bytes after last record")),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}
