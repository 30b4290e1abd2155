//! Little-endian binary containers shared by the checkpoint, datastore and
//! cache formats.
//!
//! Every file is laid out as
//!
//! ```text
//! magic[4] | version: u32 | payload_len: u64 | payload | crc64: u64
//! ```
//!
//! The CRC-64 (XZ polynomial) covers every byte before it. Loading checks, in
//! order: magic, version, length (truncation), checksum, and only then parses
//! the payload, so each failure mode surfaces as its own error.

use std::path::Path;

use crate::error::{Error, Result};

const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

const HEADER_LEN: usize = 16;
const TRAILER_LEN: usize = 8;

pub fn crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

/// Incremental CRC-64 over several slices.
pub(crate) struct Hasher(crc::Digest<'static, u64>);

impl Hasher {
    pub fn new() -> Self {
        Hasher(CRC64.digest())
    }

    pub fn update(&mut self, bytes: &[u8]) {
        self.0.update(bytes);
    }

    pub fn update_f32s(&mut self, values: &[f32]) {
        for v in values {
            self.0.update(&v.to_le_bytes());
        }
    }

    pub fn finish(self) -> u64 {
        self.0.finalize()
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, values: &[f32]) {
        self.buf.reserve(values.len() * 4);
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// LEB128 unsigned varint.
    pub fn varint(&mut self, mut v: u64) {
        loop {
            let byte = (v & 0x7f) as u8;
            v >>= 7;
            if v == 0 {
                self.buf.push(byte);
                break;
            }
            self.buf.push(byte | 0x80);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Malformed {
                what: self.what,
                detail: format!("record overruns payload at byte {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
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

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.malformed("length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn varint(&mut self) -> Result<u64> {
        let mut out = 0u64;
        for shift in (0..64).step_by(7) {
            let byte = self.u8()?;
            out |= u64::from(byte & 0x7f) << shift;
            if byte & 0x80 == 0 {
                return Ok(out);
            }
        }
        Err(self.malformed("varint too long"))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.malformed("invalid utf-8"))
    }

    pub fn malformed(&self, detail: &str) -> Error {
        Error::Malformed {
            what: self.what,
            detail: detail.to_string(),
        }
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.malformed("trailing bytes in payload"));
        }
        Ok(())
    }
}

/// Wraps `payload` in the container framing.
pub(crate) fn seal(magic: &[u8; 4], version: u32, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + TRAILER_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let sum = crc64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

/// Validates framing and returns the payload slice.
pub(crate) fn unseal<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    version: u32,
    what: &'static str,
) -> Result<&'a [u8]> {
    if bytes.len() < 4 {
        return Err(Error::Truncated { what });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if &found != magic {
        return Err(Error::BadMagic { what, found });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { what });
    }
    let found_version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found_version != version {
        return Err(Error::Version {
            what,
            found: found_version,
            expected: version,
        });
    }
    let payload_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let expected_len = (HEADER_LEN as u64)
        .checked_add(payload_len)
        .and_then(|n| n.checked_add(TRAILER_LEN as u64));
    match expected_len {
        Some(n) if (bytes.len() as u64) < n => return Err(Error::Truncated { what }),
        Some(n) if (bytes.len() as u64) == n => {}
        // Oversized files or a garbage length field: the checksum decides.
        _ => {
            let body = &bytes[..bytes.len().saturating_sub(TRAILER_LEN)];
            let stored = u64::from_le_bytes(bytes[bytes.len() - TRAILER_LEN..].try_into().unwrap());
            return Err(Error::Checksum {
                what,
                stored,
                computed: crc64(body),
            });
        }
    }
    let end = HEADER_LEN + payload_len as usize;
    let stored = u64::from_le_bytes(bytes[end..end + TRAILER_LEN].try_into().unwrap());
    let computed = crc64(&bytes[..end]);
    if stored != computed {
        return Err(Error::Checksum {
            what,
            stored,
            computed,
        });
    }
    Ok(&bytes[HEADER_LEN..end])
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn varint_round_trip() {
        let mut w = Writer::new();
        for v in [0u64, 1, 127, 128, 300, u32::MAX as u64, u64::MAX] {
            w.varint(v);
        }
        let bytes = w.into_inner();
        let mut r = Reader::new(&bytes, "test");
        for v in [0u64, 1, 127, 128, 300, u32::MAX as u64, u64::MAX] {
            assert_eq!(r.varint().unwrap(), v);
        }
        r.finish().unwrap();
    }

    #[test]
    fn framing_failures_are_distinct() {
        let sealed = seal(b"TEST", 3, b"hello payload");
        assert_eq!(unseal(&sealed, b"TEST", 3, "t").unwrap(), b"hello payload");

        assert!(matches!(unseal(&sealed, b"NOPE", 3, "t"), Err(Error::BadMagic { .. })));
        assert!(matches!(unseal(&sealed, b"TEST", 4, "t"), Err(Error::Version { .. })));
        assert!(matches!(
            unseal(&sealed[..sealed.len() - 3], b"TEST", 3, "t"),
            Err(Error::Truncated { .. })
        ));

        let mut flipped = sealed.clone();
        flipped[18] ^= 0x40;
        assert!(matches!(unseal(&flipped, b"TEST", 3, "t"), Err(Error::Checksum { .. })));
    }
}
