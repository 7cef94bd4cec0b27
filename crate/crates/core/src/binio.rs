//! Little-endian cursor helpers shared by the binary formats.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corrupted(format!(
                "truncated while reading {what} at byte {} ({} needed, {} left)",
                self.pos,
                n,
                self.bytes.len() - self.pos
            ))),
        }
    }

    pub fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array(what)?))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn finish(&self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::Corrupted(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )))
        }
    }
}

pub(crate) fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// `u32` length then the bytes.
pub(crate) fn put_section(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

pub(crate) fn read_section<'a>(r: &mut Reader<'a>, what: &str) -> Result<&'a [u8]> {
    let n = r.u32(what)? as usize;
    r.take(n, what)
}

/// Checks the 4-byte magic and the version that follows it.
pub(crate) fn read_header(r: &mut Reader<'_>, magic: [u8; 4], version: u16) -> Result<()> {
    let found = r.array::<4>("magic")?;
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    let v = r.u16("version")?;
    if v != version {
        return Err(Error::VersionMismatch {
            expected: version,
            found: v,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_back_what_was_written() {
        let mut out = b"ABCD".to_vec();
        put_u16(&mut out, 7);
        put_section(&mut out, b"hello");
        put_f64(&mut out, -0.5);
        let mut r = Reader::new(&out);
        read_header(&mut r, *b"ABCD", 7).unwrap();
        assert_eq!(read_section(&mut r, "s").unwrap(), b"hello");
        assert_eq!(r.f64("x").unwrap(), -0.5);
        r.finish().unwrap();
    }

    #[test]
    fn truncation_and_header_errors() {
        let mut r = Reader::new(b"AB");
        assert!(matches!(r.u32("n"), Err(Error::Corrupted(_))));
        let mut r = Reader::new(b"ABCE\x07\x00");
        assert!(matches!(
            read_header(&mut r, *b"ABCD", 7),
            Err(Error::BadMagic { .. })
        ));
        let mut r = Reader::new(b"ABCD\x08\x00");
        assert!(matches!(
            read_header(&mut r, *b"ABCD", 7),
            Err(Error::VersionMismatch {
                expected: 7,
                found: 8
            })
        ));
    }
}
