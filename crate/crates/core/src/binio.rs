//! Little-endian primitives with byte-offset tracking for truncation errors.

use std::io::{self, Read, Write};

use crate::error::{CmfnError, FormatError, Result};

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

    pub fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(FormatError::Truncated {
                        offset: self.offset + filled as u64,
                    }
                    .into())
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn vec(&mut self, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; len];
        self.bytes(&mut buf)?;
        Ok(buf)
    }

    pub fn u16(&mut self) -> Result<u16> {
        let mut b = [0; 2];
        self.bytes(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut b = [0; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0; 8];
        self.bytes(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn string(&mut self, len: usize) -> Result<String> {
        let raw = self.vec(len)?;
        String::from_utf8(raw).map_err(|_| FormatError::Invalid(format!("non-UTF-8 text before offset {}", self.offset)).into())
    }

    pub fn magic(&mut self, expected: &'static str) -> Result<()> {
        let got = self.vec(expected.len())?;
        if got != expected.as_bytes() {
            return Err(FormatError::BadMagic { expected }.into());
        }
        Ok(())
    }

    /// True when the underlying stream has no more bytes.
    pub fn at_end(&mut self) -> Result<bool> {
        let mut b = [0; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(true),
                Ok(_) => return Ok(false),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(CmfnError::Io(e)),
            }
        }
    }
}

pub(crate) fn put_u16(w: &mut impl Write, v: u16) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_len(w: &mut impl Write, len: usize, what: &str) -> Result<()> {
    let v = u32::try_from(len).map_err(|_| FormatError::Invalid(format!("{what} too long: {len}")))?;
    Ok(put_u32(w, v)?)
}
