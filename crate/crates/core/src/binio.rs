//! Little-endian helpers shared by the binary file formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) struct Writer<W: Write> {
    inner: W,
    name: &'static str,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W, name: &'static str) -> Self {
        Self { inner, name }
    }

    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner
            .write_all(bytes)
            .map_err(|e| Error::io(self.name, e))
    }

    pub fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        self.put(m)
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u64(b.len() as u64)?;
        self.put(b)
    }

    pub fn f32s(&mut self, vs: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 4);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.put(&buf)
    }

    pub fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        self.u64(vs.len() as u64)?;
        let mut buf = Vec::with_capacity(vs.len() * 8);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.put(&buf)
    }

    pub fn u32s(&mut self, vs: &[u32]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 4);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.put(&buf)
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush().map_err(|e| Error::io(self.name, e))?;
        Ok(self.inner)
    }
}

pub(crate) struct Reader<R: Read> {
    inner: R,
    name: &'static str,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R, name: &'static str) -> Self {
        Self { inner, name }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::Corruption(format!("{}: {e}", self.name)))
    }

    pub fn expect_magic(&mut self, m: &[u8; 4]) -> Result<()> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        if &b != m {
            return Err(Error::Corruption(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.name,
                String::from_utf8_lossy(&b),
                String::from_utf8_lossy(m)
            )));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn len(&mut self, limit: u64) -> Result<usize> {
        let n = self.u64()?;
        if n > limit {
            return Err(Error::Corruption(format!(
                "{}: length {n} too large",
                self.name
            )));
        }
        Ok(n as usize)
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.len(1 << 32)?;
        let mut b = vec![0u8; n];
        self.fill(&mut b)?;
        Ok(b)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut b = vec![0u8; n * 4];
        self.fill(&mut b)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(1 << 31)?;
        let mut b = vec![0u8; n * 8];
        self.fill(&mut b)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let mut b = vec![0u8; n * 4];
        self.fill(&mut b)?;
        Ok(b.chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}
