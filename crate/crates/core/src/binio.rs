//! Little-endian helpers for the binary file formats. Every read failure
//! reports the byte offset at which it happened.

use std::io::{Read, Write};

use crate::error::{Error, Result};

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

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = (&mut self.inner)
            .take(n as u64)
            .read_to_end(&mut buf)
            .map_err(|e| Error::format(self.offset, format!("reading {what}: {e}")))?;
        if got < n {
            return Err(Error::format(
                self.offset + got as u64,
                format!("truncated {what}: expected {n} bytes, found {got}"),
            ));
        }
        self.offset += n as u64;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let v = self.bytes(N, what)?;
        Ok(v.try_into().expect("length checked"))
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

    /// Reads `n` f32 values, rejecting non-finite ones.
    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let start = self.offset;
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| {
            Error::format(start, format!("{what} count {n} overflows"))
        })?, what)?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                start + 4 * i as u64,
                format!("non-finite value in {what}"),
            ));
        }
        Ok(vals)
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let start = self.offset;
        let raw = self.bytes(len, what)?;
        String::from_utf8(raw).map_err(|_| Error::format(start, format!("{what} is not UTF-8")))
    }

    /// Succeeds only when no bytes remain.
    pub fn finish(mut self) -> Result<()> {
        let mut extra = [0u8; 1];
        match self.inner.read(&mut extra) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::format(self.offset, "trailing bytes after end of data")),
            Err(e) => Err(Error::format(self.offset, e.to_string())),
        }
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    out.reserve(vals.len() * 4);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Writes `bytes` to `path` through a temporary file in the same
/// directory, so readers never see a partial file.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => std::path::Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_reports_offset() {
        let mut r = Reader::new(&[1u8, 0, 0, 0, 7][..]);
        assert_eq!(r.u32("a").unwrap(), 1);
        match r.u32("b") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_finite_value_is_located() {
        let mut buf = Vec::new();
        put_f32s(&mut buf, &[1.0, f32::NAN]);
        let mut r = Reader::new(&buf[..]);
        match r.f32s(2, "v") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(read_file(&p).unwrap(), b"two");
    }
}
