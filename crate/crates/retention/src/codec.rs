//! Little-endian framing shared by the session and checkpoint files: an
//! 8-byte magic, a `u32` version, a body, and a trailing FNV-1a 64 checksum
//! of every byte before it.

use std::hash::Hasher;

use fnv::FnvHasher;
use retention_core::Matrix;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FormatError {
    #[error("not a {expected} file (bad magic)")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checksum mismatch: file is truncated or corrupted")]
    Checksum,
    #[error("model fingerprint {found:#018x} does not match {expected:#018x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("malformed contents: {0}")]
    Malformed(String),
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8], version: u32) -> Self {
        let mut w = Writer { buf: magic.to_vec() };
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

    pub fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn matrix(&mut self, m: &Matrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for &v in m.as_slice() {
            self.f64(v);
        }
    }

    /// Writes a length-prefixed section produced by `f`.
    pub fn section(&mut self, f: impl FnOnce(&mut Writer)) {
        let mut inner = Writer { buf: Vec::new() };
        f(&mut inner);
        self.u64(inner.buf.len() as u64);
        self.buf.extend_from_slice(&inner.buf);
    }

    pub fn finish(mut self) -> Vec<u8> {
        let sum = fnv1a(&self.buf);
        self.u64(sum);
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

/// Header checks in order: magic, version, checksum. Returns a reader over
/// the body (checksum excluded).
pub fn open<'a>(bytes: &'a [u8], magic: &[u8; 8], kind: &'static str, version: u32) -> Result<Reader<'a>, FormatError> {
    let head = &bytes[..bytes.len().min(8)];
    if head != &magic[..head.len()] {
        return Err(FormatError::BadMagic { expected: kind });
    }
    if bytes.len() < 12 + 8 {
        return Err(FormatError::Checksum);
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if found != version {
        return Err(FormatError::UnsupportedVersion {
            found,
            supported: version,
        });
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(payload) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(FormatError::Checksum);
    }
    Ok(Reader { buf: payload, pos: 12 })
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| FormatError::Malformed(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize, FormatError> {
        usize::try_from(self.u64()?).map_err(|_| FormatError::Malformed("size overflows usize".into()))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn str(&mut self) -> Result<String, FormatError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FormatError::Malformed("invalid utf-8".into()))
    }

    pub fn matrix(&mut self) -> Result<Matrix, FormatError> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let len = rows
            .checked_mul(cols)
            .filter(|&n| n.saturating_mul(8) <= self.buf.len() - self.pos)
            .ok_or_else(|| FormatError::Malformed(format!("matrix {rows}x{cols} exceeds file")))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        Matrix::new(rows, cols, data).map_err(|e| FormatError::Malformed(e.to_string()))
    }

    /// Reads a length-prefixed section and checks `f` consumed all of it.
    pub fn section<T>(&mut self, f: impl FnOnce(&mut Reader<'a>) -> Result<T, FormatError>) -> Result<T, FormatError> {
        let len = self.usize()?;
        let body = self.take(len)?;
        let mut inner = Reader { buf: body, pos: 0 };
        let v = f(&mut inner)?;
        inner.expect_end()?;
        Ok(v)
    }

    pub fn expect_end(&self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Published FNV-1a 64 test vectors.
    #[test]
    fn fnv_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn frame_round_trip() {
        let mut w = Writer::new(b"TESTTEST", 3);
        w.u8(7);
        w.str("hé");
        w.section(|s| s.f64(-0.0));
        w.matrix(&Matrix::from_rows(&[[1.5, f64::MIN_POSITIVE]]));
        let bytes = w.finish();
        let mut r = open(&bytes, b"TESTTEST", "test", 3).unwrap();
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.str().unwrap(), "hé");
        assert_eq!(r.section(|s| s.f64()).unwrap().to_bits(), (-0.0f64).to_bits());
        assert_eq!(r.matrix().unwrap(), Matrix::from_rows(&[[1.5, f64::MIN_POSITIVE]]));
        r.expect_end().unwrap();
    }

    #[test]
    fn header_errors_in_order() {
        let bytes = Writer::new(b"TESTTEST", 1).finish();
        assert_eq!(open(&bytes, b"OTHEROTH", "x", 1).err(), Some(FormatError::BadMagic { expected: "x" }));
        assert!(matches!(open(&bytes, b"TESTTEST", "x", 2), Err(FormatError::UnsupportedVersion { found: 1, .. })));
        assert_eq!(open(&bytes[..5], b"TESTTEST", "x", 1).err(), Some(FormatError::Checksum));
        assert_eq!(open(&bytes[..bytes.len() - 1], b"TESTTEST", "x", 1).err(), Some(FormatError::Checksum));
        assert_eq!(open(&[], b"TESTTEST", "x", 1).err(), Some(FormatError::Checksum));
    }
}
