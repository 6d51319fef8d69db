//! Little-endian helpers shared by the binary file formats.

use std::path::Path;

use crate::{Error, Result};

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    /// Reads the 4-byte magic, reporting a malformed header on mismatch.
    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.buf.len() < 4 || &self.buf[..4] != magic {
            return Err(Error::MalformedHeader(format!(
                "expected magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        self.pos = 4;
        Ok(())
    }

    fn header_bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        if end > self.buf.len() {
            return Err(Error::MalformedHeader(format!(
                "header ends at byte {} of {}",
                self.buf.len(),
                end
            )));
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.pos..end]);
        self.pos = end;
        Ok(out)
    }

    pub fn header_u16(&mut self) -> Result<u16> {
        self.header_bytes().map(u16::from_le_bytes)
    }

    pub fn header_u32(&mut self) -> Result<u32> {
        self.header_bytes().map(u32::from_le_bytes)
    }

    pub fn header_u64(&mut self) -> Result<u64> {
        self.header_bytes().map(u64::from_le_bytes)
    }

    /// Checks that exactly `len` payload bytes remain.
    pub fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let rest = self.buf.len() - self.pos;
        if rest < len {
            return Err(Error::Truncated {
                expected: len,
                found: rest,
            });
        }
        if rest > len {
            return Err(Error::CountMismatch(format!(
                "{} trailing bytes after payload",
                rest - len
            )));
        }
        let out = &self.buf[self.pos..];
        self.pos = self.buf.len();
        Ok(out)
    }
}

pub(crate) fn f32s_from_le(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
