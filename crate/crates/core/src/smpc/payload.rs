//! Byte layout of SMPC app payloads.
//!
//! ```text
//! "SMPC" | version u8 = 1 | phase u8 | round u32 | dim u32 | scale u8 | body_len u64 | body
//! ```
//!
//! All integers are big-endian. Bodies by phase:
//!
//! | phase | name          | body                                                    |
//! |-------|---------------|---------------------------------------------------------|
//! | 1     | public key    | 32 key bytes                                            |
//! | 2     | key directory | count u32, then per entry: id, 32 key bytes             |
//! | 3     | share         | dim x u64 masked values, count u32, then masks          |
//! | 4     | mask bundle   | count u32, then masks                                   |
//! | 5     | mask sum      | dim x u64                                               |
//! | 6     | global        | opaque app payload                                      |
//!
//! An id is `len u16 | utf-8 bytes`; a mask is
//! `origin id | destination id | ciphertext_len u32 | ciphertext`.

use super::fixed::FixedPointVector;
use super::keys::{KeyDirectory, PUBLIC_KEY_LEN};
use super::mask::{EncryptedMask, MaskedShare};
use super::SmpcError;
use crate::protocol::ClientId;

pub const MAGIC: &[u8; 4] = b"SMPC";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 1 + 4 + 4 + 1 + 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SmpcBody {
    PublicKey([u8; PUBLIC_KEY_LEN]),
    KeyDirectory(KeyDirectory),
    Share { share: MaskedShare, masks: Vec<EncryptedMask> },
    MaskBundle(Vec<EncryptedMask>),
    MaskSum(FixedPointVector),
    Global(Vec<u8>),
}

impl SmpcBody {
    pub fn phase(&self) -> u8 {
        match self {
            SmpcBody::PublicKey(_) => 1,
            SmpcBody::KeyDirectory(_) => 2,
            SmpcBody::Share { .. } => 3,
            SmpcBody::MaskBundle(_) => 4,
            SmpcBody::MaskSum(_) => 5,
            SmpcBody::Global(_) => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmpcMessage {
    pub round: u32,
    pub dim: u32,
    pub scale: u8,
    pub body: SmpcBody,
}

fn put_id(out: &mut Vec<u8>, id: &ClientId) {
    out.extend_from_slice(&(id.as_str().len() as u16).to_be_bytes());
    out.extend_from_slice(id.as_str().as_bytes());
}

fn put_vec(out: &mut Vec<u8>, values: &[u64]) {
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
}

fn put_masks(out: &mut Vec<u8>, masks: &[EncryptedMask]) {
    out.extend_from_slice(&(masks.len() as u32).to_be_bytes());
    for m in masks {
        put_id(out, &m.origin);
        put_id(out, &m.destination);
        out.extend_from_slice(&(m.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&m.ciphertext);
    }
}

impl SmpcMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        match &self.body {
            SmpcBody::PublicKey(k) => body.extend_from_slice(k),
            SmpcBody::KeyDirectory(dir) => {
                body.extend_from_slice(&(dir.keys.len() as u32).to_be_bytes());
                for (id, key) in &dir.keys {
                    put_id(&mut body, id);
                    body.extend_from_slice(key);
                }
            }
            SmpcBody::Share { share, masks } => {
                put_vec(&mut body, &share.data.values);
                put_masks(&mut body, masks);
            }
            SmpcBody::MaskBundle(masks) => put_masks(&mut body, masks),
            SmpcBody::MaskSum(v) => put_vec(&mut body, &v.values),
            SmpcBody::Global(bytes) => body.extend_from_slice(bytes),
        }
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.body.phase());
        out.extend_from_slice(&self.round.to_be_bytes());
        out.extend_from_slice(&self.dim.to_be_bytes());
        out.push(self.scale);
        out.extend_from_slice(&(body.len() as u64).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }

    /// Decodes a message. `sender` names the owner of a share, which the
    /// body does not repeat.
    pub fn decode(bytes: &[u8], sender: Option<&ClientId>) -> Result<Self, SmpcError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(SmpcError::Malformed("not an SMPC payload".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(SmpcError::Malformed(format!("unsupported version {version}")));
        }
        let phase = r.u8()?;
        let round = r.u32()?;
        let dim = r.u32()?;
        let scale = r.u8()?;
        let body_len = r.u64()? as usize;
        if r.remaining() != body_len {
            return Err(SmpcError::Malformed(format!("body length {body_len} but {} bytes follow", r.remaining())));
        }
        let fixed = |values| FixedPointVector { values, scale_exponent: scale as u32 };
        let body = match phase {
            1 => SmpcBody::PublicKey(r.take(PUBLIC_KEY_LEN)?.try_into().unwrap()),
            2 => {
                let count = r.u32()?;
                let mut dir = KeyDirectory::default();
                for _ in 0..count {
                    let id = r.id()?;
                    dir.keys.insert(id, r.take(PUBLIC_KEY_LEN)?.try_into().unwrap());
                }
                SmpcBody::KeyDirectory(dir)
            }
            3 => {
                let values = r.vec(dim as usize)?;
                let masks = r.masks()?;
                let owner = sender
                    .cloned()
                    .or_else(|| masks.first().map(|m| m.origin.clone()))
                    .ok_or_else(|| SmpcError::Malformed("share without a known owner".into()))?;
                SmpcBody::Share { share: MaskedShare { owner, data: fixed(values) }, masks }
            }
            4 => SmpcBody::MaskBundle(r.masks()?),
            5 => SmpcBody::MaskSum(fixed(r.vec(dim as usize)?)),
            6 => SmpcBody::Global(r.take(body_len)?.to_vec()),
            other => return Err(SmpcError::Malformed(format!("unknown phase {other}"))),
        };
        if r.remaining() != 0 {
            return Err(SmpcError::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { round, dim, scale, body })
    }
}

/// Whether a payload starts with the SMPC magic.
pub fn is_smpc_payload(bytes: &[u8]) -> bool {
    bytes.starts_with(MAGIC)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], SmpcError> {
        if self.remaining() < n {
            return Err(SmpcError::Malformed(format!("truncated payload at offset {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, SmpcError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, SmpcError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, SmpcError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, SmpcError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn vec(&mut self, dim: usize) -> Result<Vec<u64>, SmpcError> {
        (0..dim).map(|_| self.u64()).collect()
    }

    fn id(&mut self) -> Result<ClientId, SmpcError> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        let s = std::str::from_utf8(raw).map_err(|e| SmpcError::Malformed(e.to_string()))?;
        ClientId::new(s).map_err(|e| SmpcError::Malformed(e.to_string()))
    }

    fn masks(&mut self) -> Result<Vec<EncryptedMask>, SmpcError> {
        let count = self.u32()?;
        (0..count)
            .map(|_| {
                let origin = self.id()?;
                let destination = self.id()?;
                let len = self.u32()? as usize;
                let ciphertext = self.take(len)?.to_vec();
                Ok(EncryptedMask { origin, destination, ciphertext })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(o: &str, d: &str) -> EncryptedMask {
        EncryptedMask { origin: o.into(), destination: d.into(), ciphertext: vec![1, 2, 3, 4] }
    }

    #[test]
    fn every_phase_round_trips() {
        let mut dir = KeyDirectory::default();
        dir.keys.insert("a".into(), [7; 32]);
        dir.keys.insert("b".into(), [8; 32]);
        let fpv = FixedPointVector { values: vec![1, u64::MAX], scale_exponent: 24 };
        let bodies = vec![
            SmpcBody::PublicKey([3; 32]),
            SmpcBody::KeyDirectory(dir),
            SmpcBody::Share { share: MaskedShare { owner: "a".into(), data: fpv.clone() }, masks: vec![mask("a", "b")] },
            SmpcBody::MaskBundle(vec![mask("a", "b"), mask("c", "b")]),
            SmpcBody::MaskSum(fpv),
            SmpcBody::Global(b"beta".to_vec()),
        ];
        for body in bodies {
            let msg = SmpcMessage { round: 4, dim: 2, scale: 24, body };
            let bytes = msg.encode();
            assert!(is_smpc_payload(&bytes));
            assert_eq!(SmpcMessage::decode(&bytes, Some(&"a".into())).unwrap(), msg);
        }
    }

    #[test]
    fn header_layout() {
        let msg = SmpcMessage { round: 1, dim: 0, scale: 24, body: SmpcBody::Global(vec![9]) };
        let bytes = msg.encode();
        assert_eq!(&bytes[..6], b"SMPC\x01\x06");
        assert_eq!(&bytes[6..10], &1u32.to_be_bytes());
        assert_eq!(bytes[14], 24);
        assert_eq!(bytes.len(), HEADER_LEN + 1);
    }

    #[test]
    fn truncation_and_garbage_rejected() {
        let bytes = SmpcMessage { round: 0, dim: 1, scale: 24, body: SmpcBody::MaskSum(FixedPointVector::zeros(1, 24)) }.encode();
        assert!(SmpcMessage::decode(&bytes[..bytes.len() - 1], None).is_err());
        assert!(SmpcMessage::decode(b"nope", None).is_err());
    }
}
