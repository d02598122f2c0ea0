//! Little-endian binary helpers shared by the `T2LA`/`T2LH` containers, and
//! the FNV-1a hash used for fingerprints and checksums.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv64(u64);

impl Fnv64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Self(Self::OFFSET)
    }

    pub fn with_seed(seed: u64) -> Self {
        let mut h = Self::new();
        h.write(&seed.to_le_bytes());
        h
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Writer<W: Write> {
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

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn usize(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")))?;
        self.u32(v)
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.usize(s.len())?;
        self.bytes(s.as_bytes())
    }

    pub fn f64s(&mut self, v: &[f64]) -> Result<()> {
        for &x in v {
            self.f64(x)?;
        }
        Ok(())
    }

    /// Rank, extents, then payload.
    pub fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.usize(t.shape().len())?;
        for &d in t.shape() {
            self.usize(d)?;
        }
        self.f64s(t.data())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, buf: &mut [u8], what: &'static str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Truncated(what),
            _ => Error::Io(e),
        })
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f64(&mut self, what: &'static str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn usize(&mut self, what: &'static str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    pub fn str(&mut self, what: &'static str) -> Result<String> {
        let n = self.usize(what)?;
        if n > 1 << 24 {
            return Err(Error::Format(format!("{what}: string length {n} too large")));
        }
        let mut buf = vec![0u8; n];
        self.bytes(&mut buf, what)?;
        String::from_utf8(buf).map_err(|_| Error::Format(format!("{what}: invalid utf-8")))
    }

    pub fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64(what)).collect()
    }

    pub fn tensor(&mut self, what: &'static str) -> Result<Tensor> {
        let rank = self.usize(what)?;
        if rank > 8 {
            return Err(Error::Format(format!("{what}: tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.usize(what))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(Error::Format(format!("{what}: tensor of {n} elements")));
        }
        let data = self.f64s(n, what)?;
        Tensor::new(shape, data)
    }

    /// Fails unless the stream is exhausted.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after payload".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        let mut h = Fnv64::new();
        h.write(b"");
        assert_eq!(h.finish(), 0xcbf29ce484222325);
        let mut h = Fnv64::new();
        h.write(b"a");
        assert_eq!(h.finish(), 0xaf63dc4c8601ec8c);
        let mut h = Fnv64::new();
        h.write(b"foobar");
        assert_eq!(h.finish(), 0x85944171f73967e8);
    }

    #[test]
    fn short_read_is_truncation() {
        let mut r = Reader::new(&[1u8, 2][..]);
        assert!(matches!(r.u32("x"), Err(Error::Truncated("x"))));
    }
}
