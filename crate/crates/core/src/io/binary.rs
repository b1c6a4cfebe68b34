use super::IoError;

pub(crate) const VERSION: u16 = 1;

/// Sequential little-endian reader over a byte slice.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(IoError::TruncatedFile {
                needed: self.pos as u64 + n as u64,
                available: self.bytes.len() as u64,
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn prefix(&mut self, magic: &[u8; 4]) -> Result<(), IoError> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if &found != magic {
            return Err(IoError::BadMagic {
                expected: *magic,
                found,
            });
        }
        let version = self.u16()?;
        if version != VERSION {
            return Err(IoError::UnsupportedVersion(version));
        }
        let _reserved = self.u16()?;
        Ok(())
    }

    pub fn u16(&mut self) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Fail unless exactly `payload` bytes remain.
    pub fn expect_remaining(&self, payload: u64) -> Result<(), IoError> {
        let expected = self.pos as u64 + payload;
        let actual = self.bytes.len() as u64;
        if actual < expected {
            return Err(IoError::TruncatedFile {
                needed: expected,
                available: actual,
            });
        }
        if actual > expected {
            return Err(IoError::TrailingData { expected, actual });
        }
        Ok(())
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, IoError> {
        let raw = self.take(n.checked_mul(4).ok_or(IoError::TruncatedFile {
            needed: u64::MAX,
            available: self.bytes.len() as u64,
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub(crate) fn write_prefix(out: &mut Vec<u8>, magic: &[u8; 4]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
}

pub(crate) fn write_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn checked_pixels(width: u32, height: u32) -> Result<usize, IoError> {
    let n = width as u64 * height as u64;
    if n > 1u64 << 31 {
        return Err(IoError::DimensionOverflow { width, height });
    }
    Ok(n as usize)
}
