//! Big-endian helpers for app payloads.

use crate::error::{MlError, MlResult};

#[derive(Debug, Default)]
pub struct Writer(pub Vec<u8>);

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        Writer(magic.to_vec())
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }

    pub fn u32(&mut self, v: usize) -> &mut Self {
        self.0.extend_from_slice(&(v as u32).to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn f64s(&mut self, values: &[f64]) -> &mut Self {
        for v in values {
            self.0.extend_from_slice(&v.to_be_bytes());
        }
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.extend_from_slice(b);
        self
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.0)
    }
}

pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], magic: &[u8; 4]) -> MlResult<Self> {
        if !bytes.starts_with(magic) {
            return Err(MlError::invalid(format!("payload does not start with {:?}", String::from_utf8_lossy(magic))));
        }
        Ok(Self { bytes, pos: 4 })
    }

    pub fn take(&mut self, n: usize) -> MlResult<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| MlError::invalid(format!("payload truncated at offset {}", self.pos)))?;
        self.pos += n;
        Ok(out)
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let out = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        out
    }

    pub fn u8(&mut self) -> MlResult<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> MlResult<usize> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    pub fn u64(&mut self) -> MlResult<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> MlResult<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| MlError::invalid("length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_be_bytes(c.try_into().unwrap())).collect())
    }

    pub fn finish(&self) -> MlResult<()> {
        if self.pos != self.bytes.len() {
            return Err(MlError::invalid(format!("{} trailing payload bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}
