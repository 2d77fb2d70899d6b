//! Little-endian framing shared by the volume and checkpoint formats:
//! `magic ‖ payload ‖ crc32(payload)`.

use crate::error::{Error, Result};

/// Appends little-endian fields to a payload.
#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Validation(format!("{v} does not fit in 32 bits")))?;
        self.u32(v);
        Ok(())
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    /// `magic ‖ payload ‖ crc32`.
    pub fn finish(self, magic: &[u8]) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        let mut out = Vec::with_capacity(magic.len() + self.buf.len() + 4);
        out.extend_from_slice(magic);
        out.extend_from_slice(&self.buf);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }
}

/// Reads little-endian fields, reporting truncation by what was being read.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks the magic and returns a reader over everything after it.
    pub fn open(bytes: &'a [u8], magic: &'static [u8]) -> Result<Self> {
        if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
            return Err(Error::BadMagic { expected: magic });
        }
        Ok(Self {
            buf: &bytes[magic.len()..],
            pos: 0,
        })
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.saturating_mul(4), what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.saturating_mul(8), what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    /// Verifies the trailing checksum against everything read so far. Must be
    /// called once the payload has been fully parsed.
    pub fn finish(mut self) -> Result<()> {
        let payload = &self.buf[..self.pos];
        let stored = self.u32("checksum")?;
        if self.pos != self.buf.len() {
            return Err(Error::Validation(format!(
                "{} trailing bytes after checksum",
                self.buf.len() - self.pos
            )));
        }
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(())
    }
}
