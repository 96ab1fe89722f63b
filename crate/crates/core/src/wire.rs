//! Little-endian primitives and the tensor wire format shared by every
//! checkpoint and store file: `rank u8, dims u32 × rank, f32 payload`.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) struct Writer<W> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
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

    pub fn f32(&mut self, v: f32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn str16(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len())
            .map_err(|_| Error::Param(format!("string of {} bytes is too long", s.len())))?;
        self.u16(len)?;
        self.bytes(s.as_bytes())
    }

    pub fn dims(&mut self, dims: &[usize]) -> Result<()> {
        let rank = u8::try_from(dims.len())
            .map_err(|_| Error::Param(format!("rank {} too large", dims.len())))?;
        self.u8(rank)?;
        for &d in dims {
            let d = u32::try_from(d).map_err(|_| Error::Param(format!("dim {d} too large")))?;
            self.u32(d)?;
        }
        Ok(())
    }

    pub fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.dims(t.shape())?;
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub(crate) struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    return Err(Error::format(
                        self.offset + read as u64,
                        format!(
                            "truncated {what}: expected {} bytes, got {read}",
                            buf.len()
                        ),
                    ))
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn vec(&mut self, len: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b, what)?;
        Ok(b[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.fill(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }

    pub fn str16(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let start = self.offset;
        let bytes = self.vec(len, what)?;
        String::from_utf8(bytes).map_err(|_| Error::format(start, format!("{what} is not UTF-8")))
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let mut b = [0u8; 4];
        self.fill(&mut b, "magic")?;
        if &b != expected {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&b),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u16) -> Result<u16> {
        let at = self.offset;
        let v = self.u16("version")?;
        if v != supported {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        Ok(v)
    }

    pub fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8("tensor rank")? as usize;
        (0..rank)
            .map(|_| self.u32("tensor dim").map(|d| d as usize))
            .collect()
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let dims = self.dims()?;
        let n: usize = dims.iter().product();
        let raw = self.vec(n * 4, "tensor payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(dims, data)
    }

    /// Fails unless the stream is exhausted.
    pub fn finish(mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::format(self.offset, "trailing bytes after record")),
        }
    }
}
