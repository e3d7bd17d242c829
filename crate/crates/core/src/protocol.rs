//! Identities, roles and the wire framing shared by relay, controller and testbed.
//!
//! Every frame on a relay connection has the layout
//!
//! ```text
//! +--------+----------------+-------------------+----------------+-----------+
//! | "FCW1" | header_len u32 | header (JSON)     | payload_len u64| payload   |
//! +--------+----------------+-------------------+----------------+-----------+
//! ```
//!
//! Integers are big-endian. The header is a JSON object carrying the routing
//! metadata; the payload is opaque to the relay.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FCW1";
pub const MAX_HEADER_LEN: usize = 64 * 1024;
/// Fixed overhead of a frame besides header and payload bytes.
pub const FIXED_OVERHEAD: usize = 4 + 4 + 8;

/// Identifier reserved for frames originated by the relay itself.
pub const RELAY_ID: &str = "@relay";

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("header of {0} bytes exceeds the {MAX_HEADER_LEN} byte limit")]
    HeaderTooLarge(usize),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("declared size {declared} does not match payload length {actual}")]
    SizeMismatch { declared: u64, actual: u64 },
    #[error("invalid frame: {0}")]
    Invalid(String),
}

/// Opaque client identifier, unique within one workflow.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(String);

impl ClientId {
    pub fn new(value: impl Into<String>) -> Result<Self, ProtocolError> {
        let value = value.into();
        if value.is_empty() {
            return Err(ProtocolError::Invalid("empty client id".into()));
        }
        Ok(Self(value))
    }

    pub fn relay() -> Self {
        Self(RELAY_ID.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_relay(&self) -> bool {
        self.0 == RELAY_ID
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for ClientId {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClientId::new(s)
    }
}

impl From<&str> for ClientId {
    /// Panics on an empty string; use [`ClientId::new`] for untrusted input.
    fn from(s: &str) -> Self {
        ClientId::new(s).expect("client id must be nonempty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Coordinator,
    Participant,
}

impl Role {
    pub fn is_coordinator(self) -> bool {
        matches!(self, Role::Coordinator)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Coordinator => "coordinator",
            Role::Participant => "participant",
        })
    }
}

impl std::str::FromStr for Role {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coordinator" => Ok(Role::Coordinator),
            "participant" => Ok(Role::Participant),
            other => Err(ProtocolError::Invalid(format!("unknown role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameKind {
    ToCoordinator,
    Broadcast,
    Control,
}

/// A unit of traffic on a relay connection.
///
/// `recipient` narrows a coordinator frame to a single participant; it is
/// only legal on `Broadcast` frames. `attrs` carries control metadata
/// (registration role and credentials, step markers) and is never read by the
/// relay for data frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub workflow_id: String,
    pub sender: ClientId,
    pub kind: FrameKind,
    pub recipient: Option<ClientId>,
    pub declared_size: Option<u64>,
    pub attrs: BTreeMap<String, String>,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(workflow_id: impl Into<String>, sender: ClientId, kind: FrameKind, payload: Vec<u8>) -> Self {
        Self {
            workflow_id: workflow_id.into(),
            sender,
            kind,
            recipient: None,
            declared_size: None,
            attrs: BTreeMap::new(),
            payload,
        }
    }

    pub fn control(workflow_id: impl Into<String>, sender: ClientId, control: &str) -> Self {
        Self::new(workflow_id, sender, FrameKind::Control, Vec::new()).with_attr(ATTR_CONTROL, control)
    }

    pub fn with_attr(mut self, key: &str, value: impl Into<String>) -> Self {
        self.attrs.insert(key.to_string(), value.into());
        self
    }

    pub fn with_recipient(mut self, recipient: ClientId) -> Self {
        self.recipient = Some(recipient);
        self
    }

    pub fn with_declared_size(mut self) -> Self {
        self.declared_size = Some(self.payload.len() as u64);
        self
    }

    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).map(String::as_str)
    }

    /// The control verb of a `Control` frame.
    pub fn control_verb(&self) -> Option<&str> {
        if self.kind == FrameKind::Control {
            self.attr(ATTR_CONTROL)
        } else {
            None
        }
    }

    /// Checks the structural invariants that do not depend on session state.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if let Some(declared) = self.declared_size {
            if declared != self.payload.len() as u64 {
                return Err(ProtocolError::SizeMismatch { declared, actual: self.payload.len() as u64 });
            }
        }
        if self.recipient.is_some() && self.kind != FrameKind::Broadcast {
            return Err(ProtocolError::Invalid("recipient is only valid on coordinator frames".into()));
        }
        Ok(())
    }

    /// Number of bytes [`encode_frame`] will produce for this frame.
    pub fn encoded_len(&self) -> Result<usize, ProtocolError> {
        Ok(FIXED_OVERHEAD + header_bytes(self)?.len() + self.payload.len())
    }
}

pub const ATTR_CONTROL: &str = "control";
pub const ATTR_ROLE: &str = "role";
pub const ATTR_CREDENTIALS: &str = "credentials";
pub const ATTR_STEP: &str = "step";
pub const ATTR_REASON: &str = "reason";

/// Control verbs understood by the relay and the controllers.
pub mod control {
    /// First frame on a connection; consumed by the relay.
    pub const REGISTER: &str = "register";
    /// Relay reply to a successful registration.
    pub const REGISTERED: &str = "registered";
    /// Relay reply to a rejected registration; `reason` attr explains.
    pub const REJECTED: &str = "rejected";
    /// Relay notice to the coordinator that a participant joined.
    pub const JOINED: &str = "joined";
    /// Coordinator locks the session membership; forwarded to participants.
    pub const START: &str = "start";
    /// Participant reports its app finished the given step.
    pub const STEP_DONE: &str = "step_done";
    /// Coordinator barrier: every member finished the given step.
    pub const STEP_COMPLETE: &str = "step_complete";
    /// Any member aborts the workflow.
    pub const ABORT: &str = "abort";
    /// Relay notice that a member connection was lost.
    pub const FAILED: &str = "failed";
    /// Coordinator ends the session; relay replies with `closed`.
    pub const CLOSE: &str = "close";
    /// Relay notice carrying the frozen traffic report as JSON payload.
    pub const CLOSED: &str = "closed";
}

/// Workflow membership as known to the relay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowSession {
    pub workflow_id: String,
    pub credentials: String,
    pub members: Vec<(ClientId, Role)>,
}

impl WorkflowSession {
    pub fn coordinator(&self) -> Option<&ClientId> {
        self.members.iter().find(|(_, r)| r.is_coordinator()).map(|(id, _)| id)
    }

    pub fn participants(&self) -> impl Iterator<Item = &ClientId> {
        self.members.iter().filter(|(_, r)| !r.is_coordinator()).map(|(id, _)| id)
    }

    pub fn role_of(&self, id: &ClientId) -> Option<Role> {
        self.members.iter().find(|(m, _)| m == id).map(|(_, r)| *r)
    }

    /// Number of members, the coordinator included.
    pub fn n_participants(&self) -> usize {
        self.members.len()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    workflow_id: String,
    sender: ClientId,
    kind: FrameKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    recipient: Option<ClientId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    declared_size: Option<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attrs: BTreeMap<String, String>,
}

fn header_bytes(frame: &Frame) -> Result<Vec<u8>, ProtocolError> {
    let header = Header {
        workflow_id: frame.workflow_id.clone(),
        sender: frame.sender.clone(),
        kind: frame.kind,
        recipient: frame.recipient.clone(),
        declared_size: frame.declared_size,
        attrs: frame.attrs.clone(),
    };
    let bytes = serde_json::to_vec(&header).map_err(|e| ProtocolError::MalformedHeader(e.to_string()))?;
    if bytes.len() > MAX_HEADER_LEN {
        return Err(ProtocolError::HeaderTooLarge(bytes.len()));
    }
    Ok(bytes)
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, ProtocolError> {
    frame.validate()?;
    let header = header_bytes(frame)?;
    let mut out = Vec::with_capacity(FIXED_OVERHEAD + header.len() + frame.payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_be_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(frame.payload.len() as u64).to_be_bytes());
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

/// Result of attempting to decode a frame from the front of a buffer.
#[derive(Debug, PartialEq, Eq)]
pub enum Decoded {
    Frame { frame: Frame, consumed: usize },
    /// The buffer holds a prefix of a frame; at least `needed` more bytes are required.
    NeedMore { needed: usize },
}

pub fn decode_frame(bytes: &[u8]) -> Result<Decoded, ProtocolError> {
    let need = |have: usize, want: usize| Ok(Decoded::NeedMore { needed: want - have });
    // Check the magic on whatever prefix is present so garbage is rejected early.
    let prefix = bytes.len().min(4);
    if bytes[..prefix] != MAGIC[..prefix] {
        let mut got = [0u8; 4];
        got[..prefix].copy_from_slice(&bytes[..prefix]);
        return Err(ProtocolError::BadMagic(got));
    }
    if bytes.len() < 8 {
        return need(bytes.len(), 8);
    }
    let header_len = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if header_len > MAX_HEADER_LEN {
        return Err(ProtocolError::HeaderTooLarge(header_len));
    }
    let header_end = 8 + header_len;
    if bytes.len() < header_end + 8 {
        return need(bytes.len(), header_end + 8);
    }
    let payload_len = u64::from_be_bytes(bytes[header_end..header_end + 8].try_into().unwrap());
    let payload_start = header_end + 8;
    let total = usize::try_from(payload_len)
        .ok()
        .and_then(|p| payload_start.checked_add(p))
        .ok_or_else(|| ProtocolError::Invalid(format!("payload length {payload_len} overflows")))?;
    if bytes.len() < total {
        return need(bytes.len(), total);
    }
    let header: Header =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| ProtocolError::MalformedHeader(e.to_string()))?;
    let frame = Frame {
        workflow_id: header.workflow_id,
        sender: header.sender,
        kind: header.kind,
        recipient: header.recipient,
        declared_size: header.declared_size,
        attrs: header.attrs,
        payload: bytes[payload_start..total].to_vec(),
    };
    frame.validate()?;
    Ok(Decoded::Frame { frame, consumed: total })
}

/// Reads exactly one frame from a blocking reader. Returns `Ok(None)` on a
/// clean end of stream at a frame boundary.
pub fn read_frame<R: std::io::Read>(reader: &mut R) -> std::io::Result<Option<(Frame, usize)>> {
    use std::io::{Error, ErrorKind};

    let mut fixed = [0u8; 8];
    let mut filled = 0;
    while filled < fixed.len() {
        match reader.read(&mut fixed[filled..])? {
            0 if filled == 0 => return Ok(None),
            0 => return Err(Error::new(ErrorKind::UnexpectedEof, "truncated frame")),
            n => filled += n,
        }
    }
    if &fixed[..4] != MAGIC {
        return Err(Error::new(ErrorKind::InvalidData, ProtocolError::BadMagic(fixed[..4].try_into().unwrap())));
    }
    let header_len = u32::from_be_bytes(fixed[4..8].try_into().unwrap()) as usize;
    if header_len > MAX_HEADER_LEN {
        return Err(Error::new(ErrorKind::InvalidData, ProtocolError::HeaderTooLarge(header_len)));
    }
    let mut buf = fixed.to_vec();
    buf.resize(8 + header_len + 8, 0);
    reader.read_exact(&mut buf[8..])?;
    let payload_len = u64::from_be_bytes(buf[8 + header_len..].try_into().unwrap()) as usize;
    let start = buf.len();
    buf.resize(start + payload_len, 0);
    reader.read_exact(&mut buf[start..])?;
    match decode_frame(&buf).map_err(|e| Error::new(ErrorKind::InvalidData, e))? {
        Decoded::Frame { frame, consumed } => Ok(Some((frame, consumed))),
        Decoded::NeedMore { .. } => Err(Error::new(ErrorKind::UnexpectedEof, "truncated frame")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(payload: Vec<u8>) -> Frame {
        Frame::new("wf-1", ClientId::from("p1"), FrameKind::ToCoordinator, payload)
    }

    fn unwrap_frame(d: Decoded) -> (Frame, usize) {
        match d {
            Decoded::Frame { frame, consumed } => (frame, consumed),
            other => panic!("expected a frame, got {other:?}"),
        }
    }

    #[test]
    fn empty_payload_has_zero_length_field() {
        let bytes = encode_frame(&sample(vec![])).unwrap();
        let tail = &bytes[bytes.len() - 8..];
        assert_eq!(tail, &0u64.to_be_bytes());
        let (frame, consumed) = unwrap_frame(decode_frame(&bytes).unwrap());
        assert!(frame.payload.is_empty());
        assert_eq!(consumed, bytes.len());
    }

    #[test]
    fn section_lengths_sum_to_total() {
        let frame = sample(vec![1, 2, 3, 4, 5]);
        let bytes = encode_frame(&frame).unwrap();
        let header_len = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 4 + 4 + header_len + 8 + 5);
        assert_eq!(frame.encoded_len().unwrap(), bytes.len());
        assert_eq!(&bytes[..4], b"FCW1");
        assert_eq!(&bytes[bytes.len() - 5..], &[1, 2, 3, 4, 5]);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode_frame(&sample(vec![9; 3])).unwrap();
        bytes[0] ^= 0xff;
        assert!(matches!(decode_frame(&bytes), Err(ProtocolError::BadMagic(_))));
    }

    #[test]
    fn truncated_payload_needs_more() {
        let bytes = encode_frame(&sample(vec![7; 10])).unwrap();
        let cut = &bytes[..bytes.len() - 6];
        assert_eq!(decode_frame(cut).unwrap(), Decoded::NeedMore { needed: 6 });
        assert_eq!(decode_frame(&bytes[..2]).unwrap(), Decoded::NeedMore { needed: 6 });
    }

    #[test]
    fn declared_size_mismatch_is_integrity_error() {
        let mut frame = sample(vec![1, 2, 3]);
        frame.declared_size = Some(3);
        let mut bytes = encode_frame(&frame).unwrap();
        // Drop one payload byte and patch the payload length so the frame is self-consistent.
        bytes.pop();
        let len_at = bytes.len() - 2 - 8;
        bytes[len_at..len_at + 8].copy_from_slice(&2u64.to_be_bytes());
        assert_eq!(
            decode_frame(&bytes),
            Err(ProtocolError::SizeMismatch { declared: 3, actual: 2 })
        );
        frame.declared_size = Some(4);
        assert!(encode_frame(&frame).is_err());
    }

    #[test]
    fn oversized_header_rejected() {
        let frame = sample(vec![]).with_attr("blob", "x".repeat(MAX_HEADER_LEN));
        assert!(matches!(encode_frame(&frame), Err(ProtocolError::HeaderTooLarge(_))));
    }

    #[test]
    fn recipient_only_on_broadcast() {
        let frame = sample(vec![]).with_recipient(ClientId::from("p2"));
        assert!(encode_frame(&frame).is_err());
    }

    #[test]
    fn blocking_reader_reads_sequential_frames() {
        let a = encode_frame(&sample(vec![1])).unwrap();
        let b = encode_frame(&Frame::control("wf-1", ClientId::from("c"), control::START)).unwrap();
        let mut stream: &[u8] = &[a.clone(), b.clone()].concat();
        let (fa, na) = read_frame(&mut stream).unwrap().unwrap();
        let (fb, nb) = read_frame(&mut stream).unwrap().unwrap();
        assert_eq!((na, nb), (a.len(), b.len()));
        assert_eq!(fa.payload, vec![1]);
        assert_eq!(fb.control_verb(), Some(control::START));
        assert!(read_frame(&mut stream).unwrap().is_none());
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        (
            "[a-z0-9-]{1,12}",
            "[a-zA-Z0-9@]{1,10}",
            prop_oneof![Just(FrameKind::ToCoordinator), Just(FrameKind::Broadcast), Just(FrameKind::Control)],
            proptest::collection::vec(any::<u8>(), 0..256),
            any::<bool>(),
            proptest::collection::btree_map("[a-z]{1,6}", "[ -~]{0,12}", 0..3),
        )
            .prop_map(|(wf, sender, kind, payload, declare, attrs)| {
                let mut f = Frame::new(wf, ClientId::new(sender).unwrap(), kind, payload);
                f.attrs = attrs;
                if declare {
                    f = f.with_declared_size();
                }
                f
            })
    }

    proptest! {
        #[test]
        fn round_trip(frame in arb_frame()) {
            let bytes = encode_frame(&frame).unwrap();
            let (decoded, consumed) = unwrap_frame(decode_frame(&bytes).unwrap());
            prop_assert_eq!(consumed, bytes.len());
            prop_assert_eq!(decoded, frame);
        }

        #[test]
        fn concatenated_frames_are_self_delimiting(frames in proptest::collection::vec(arb_frame(), 1..6)) {
            let stream: Vec<u8> = frames.iter().flat_map(|f| encode_frame(f).unwrap()).collect();
            let mut offset = 0;
            let mut out = Vec::new();
            while offset < stream.len() {
                let (f, n) = unwrap_frame(decode_frame(&stream[offset..]).unwrap());
                out.push(f);
                offset += n;
            }
            prop_assert_eq!(out, frames);
        }
    }
}
