//! Little-endian primitives shared by the binary formats.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn opt_f64(&mut self, v: Option<f64>) {
        match v {
            Some(x) => {
                self.u8(1);
                self.f64(x);
            }
            None => self.u8(0),
        }
    }
}

/// Cursor over a file's bytes; errors name the file.
pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    /// Checks the magic and returns the reader positioned after the version, plus the version.
    pub fn open(data: &'a [u8], path: &'a Path, magic: &[u8; 4]) -> Result<(Self, u32)> {
        let mut r = Self { data, pos: 0, path };
        if r.take(4)? != magic {
            return Err(r.fail(format!("not a {} file", String::from_utf8_lossy(magic))));
        }
        let version = r.u32()?;
        Ok((r, version))
    }

    pub fn fail(&self, reason: impl Into<String>) -> Error {
        Error::format(self.path, reason)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.fail(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// A length that must fit in the remaining bytes at `unit` bytes per item.
    pub fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.data.len() - self.pos) as u64;
        if n.checked_mul(unit.max(1) as u64).is_none_or(|b| b > remaining) {
            return Err(self.fail(format!("length {n} overruns the file")));
        }
        Ok(n as usize)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| self.fail("invalid UTF-8 string"))
    }

    pub fn opt_f64(&mut self) -> Result<Option<f64>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.f64()?)),
            t => Err(self.fail(format!("bad option tag {t}"))),
        }
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.fail(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

/// First 8 bytes (little-endian) of the SHA-256 of `data`.
pub fn digest64(data: &[u8]) -> u64 {
    use sha2::{Digest, Sha256};
    let h = Sha256::digest(data);
    u64::from_le_bytes(h[..8].try_into().expect("digest is 32 bytes"))
}
