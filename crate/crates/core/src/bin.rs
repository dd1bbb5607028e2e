//! Little-endian cursor helpers shared by the binary file formats.

use crate::error::ParseError;

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], ParseError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(ParseError::UnexpectedEof {
                offset: self.pos,
                field,
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &'static str) -> Result<(), ParseError> {
        let found = self.take(expected.len(), "magic")?;
        if found != expected.as_bytes() {
            return Err(ParseError::BadMagic {
                expected,
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn u32(&mut self, field: &'static str) -> Result<u32, ParseError> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self, field: &'static str) -> Result<u64, ParseError> {
        let b = self.take(8, field)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub fn f64(&mut self, field: &'static str) -> Result<f64, ParseError> {
        Ok(f64::from_bits(self.u64(field)?))
    }

    pub fn f32s(&mut self, n: usize, field: &'static str) -> Result<Vec<f32>, ParseError> {
        let len = n.checked_mul(4).ok_or(ParseError::UnexpectedEof {
            offset: self.pos,
            field,
        })?;
        let raw = self.take(len, field)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn f64s(&mut self, n: usize, field: &'static str) -> Result<Vec<f64>, ParseError> {
        (0..n).map(|_| self.f64(field)).collect()
    }

    /// u32 length prefix followed by UTF-8 bytes.
    pub fn string(&mut self, field: &'static str) -> Result<String, ParseError> {
        let at = self.pos;
        let n = self.u32(field)? as usize;
        let raw = self.take(n, field)?;
        String::from_utf8(raw.to_vec()).map_err(|e| ParseError::InvalidField {
            offset: at,
            field,
            detail: e.to_string(),
        })
    }

    pub fn finish(self) -> Result<(), ParseError> {
        if self.pos != self.bytes.len() {
            return Err(ParseError::TrailingBytes { offset: self.pos });
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
