//! Little-endian byte reading/writing shared by the key, model, index, and
//! wire formats. The reader tracks its offset so parse errors can point at
//! the failing byte.

use crate::error::{Error, Result};

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn with_capacity(cap: usize) -> Self {
        Self {
            buf: Vec::with_capacity(cap),
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn put_f64_slice(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for &v in vs {
            self.put_f64(v);
        }
    }

    /// u32 length prefix followed by UTF-8 bytes.
    pub fn put_str(&mut self, s: &str) {
        self.put_u32(s.len() as u32);
        self.put_bytes(s.as_bytes());
    }

    /// u32 length prefix followed by raw bytes.
    pub fn put_blob(&mut self, b: &[u8]) {
        self.put_u32(b.len() as u32);
        self.put_bytes(b);
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn error(&self, what: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            what: what.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                needed: n - self.remaining(),
                have: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Parse {
            offset: self.pos as u64,
            what: "element count overflows".into(),
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Reads a u32 length prefix, then that many UTF-8 bytes.
    pub fn str_blob(&mut self) -> Result<String> {
        let at = self.pos as u64;
        let raw = self.blob()?;
        String::from_utf8(raw).map_err(|_| Error::Parse {
            offset: at,
            what: "invalid UTF-8 in string field".into(),
        })
    }

    /// Reads a u32 length prefix, then that many raw bytes.
    pub fn blob(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4], kind: &str) -> Result<()> {
        let at = self.pos as u64;
        let got = self.take(4).map_err(|_| Error::Parse {
            offset: at,
            what: format!("bad magic: {kind} file too short"),
        })?;
        if got != magic {
            return Err(Error::Parse {
                offset: at,
                what: format!(
                    "bad magic: expected {:?} for {kind} file",
                    std::str::from_utf8(magic).unwrap_or("?")
                ),
            });
        }
        Ok(())
    }

    pub fn expect_version(&mut self, expected: u16) -> Result<()> {
        let found = self.u16()?;
        if found != expected {
            return Err(Error::Version { found, expected });
        }
        Ok(())
    }

    /// Fails if any input remains unconsumed.
    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Parse {
                offset: self.pos as u64,
                what: format!("{} trailing bytes after end of content", self.remaining()),
            });
        }
        Ok(())
    }
}

/// Packs bits LSB-first: bit `j` lands in byte `j / 8` at position `j % 8`.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (j, &b) in bits.iter().enumerate() {
        if b {
            out[j / 8] |= 1 << (j % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|j| bytes[j / 8] >> (j % 8) & 1 == 1).collect()
}
