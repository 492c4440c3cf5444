//! Little-endian binary encoding helpers shared by the policy and
//! disagreement-set file formats.
//!
//! Floats are stored as raw IEEE-754 bit patterns, so every round trip is
//! bit-exact.

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_bytes(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    pub fn put_str(&mut self, s: &str) {
        self.put_u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
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

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.buf.len() {
            return Err(Error::Format(format!(
                "unexpected end of data at offset {} (wanted {} more bytes)",
                self.pos, len
            )));
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    pub fn get_bytes(&mut self, len: usize) -> Result<&'a [u8]> {
        self.take(len)
    }

    pub fn get_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn get_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn get_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn get_f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(u64::from_le_bytes(
            self.take(8)?.try_into().unwrap(),
        )))
    }

    pub fn get_str(&mut self) -> Result<String> {
        let len = self.get_u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format("invalid utf-8 in string field".into()))
    }

    /// Asserts that every byte has been consumed.
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after end of payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Checks a 4-byte magic tag and a format version.
pub fn expect_header(r: &mut Reader, magic: &[u8; 4], version: u32) -> Result<()> {
    let tag = r.get_bytes(4)?;
    if tag != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            tag,
            std::str::from_utf8(magic).unwrap_or("?")
        )));
    }
    let v = r.get_u32()?;
    if v != version {
        return Err(Error::Format(format!(
            "unsupported format version {v}, expected {version}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_float_bits() {
        let mut w = Writer::new();
        w.put_f64(0.1 + 0.2);
        w.put_f64(-0.0);
        w.put_u64(u64::MAX);
        w.put_str("pi_safe");
        let bytes = w.into_bytes();

        let mut r = Reader::new(&bytes);
        assert_eq!(r.get_f64().unwrap().to_bits(), (0.1_f64 + 0.2).to_bits());
        assert_eq!(r.get_f64().unwrap().to_bits(), (-0.0f64).to_bits());
        assert_eq!(r.get_u64().unwrap(), u64::MAX);
        assert_eq!(r.get_str().unwrap(), "pi_safe");
        r.finish().unwrap();
    }

    #[test]
    fn truncated_input_is_an_error() {
        let mut w = Writer::new();
        w.put_f64(1.0);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes[..5]);
        assert!(r.get_f64().is_err());
    }
}
