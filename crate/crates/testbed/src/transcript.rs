//! Inspection of relay transcripts: SMPC message accounting and raw-byte
//! containment scans.

use std::collections::{BTreeMap, BTreeSet};

use fedmesh_core::protocol::{decode_frame, ClientId, Decoded, Frame, FrameKind};
use fedmesh_core::relay::TranscriptEntry;
use fedmesh_core::smpc::payload::is_smpc_payload;
use fedmesh_core::smpc::{SmpcBody, SmpcMessage};

use crate::{TestbedError, TestbedResult};

pub fn frame_of(entry: &TranscriptEntry) -> TestbedResult<Frame> {
    match decode_frame(&entry.encoded).map_err(|e| TestbedError::Failed(format!("bad transcript frame: {e}")))? {
        Decoded::Frame { frame, .. } => Ok(frame),
        Decoded::NeedMore { .. } => Err(TestbedError::Failed("truncated transcript frame".into())),
    }
}

/// SMPC traffic of one aggregation round as seen by the relay.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SmpcRound {
    /// Distinct (origin, destination) pairs of encrypted masks in share
    /// uploads and mask bundles.
    pub mask_pairs: BTreeSet<(ClientId, ClientId)>,
    /// Mask ciphertexts carried, counting each frame separately.
    pub mask_copies: usize,
    /// Participant uploads per phase (3 = share, 5 = mask sum).
    pub uploads: BTreeMap<u8, usize>,
    /// Coordinator frames per phase (4 = bundle, 6 = global).
    pub downloads: BTreeMap<u8, usize>,
}

/// Groups the SMPC data frames of a transcript by aggregation round.
/// Key-exchange frames (phases 1 and 2) are left out.
pub fn smpc_rounds(transcript: &[TranscriptEntry]) -> TestbedResult<BTreeMap<u32, SmpcRound>> {
    let mut rounds: BTreeMap<u32, SmpcRound> = BTreeMap::new();
    for entry in transcript {
        if entry.kind == FrameKind::Control {
            continue;
        }
        let frame = frame_of(entry)?;
        if !is_smpc_payload(&frame.payload) {
            continue;
        }
        let msg = SmpcMessage::decode(&frame.payload, Some(&frame.sender))
            .map_err(|e| TestbedError::Failed(format!("bad SMPC payload from {}: {e}", frame.sender)))?;
        let phase = msg.body.phase();
        if phase <= 2 {
            continue;
        }
        let round = rounds.entry(msg.round).or_default();
        let masks = match &msg.body {
            SmpcBody::Share { masks, .. } => masks.as_slice(),
            SmpcBody::MaskBundle(masks) => masks.as_slice(),
            _ => &[],
        };
        round.mask_copies += masks.len();
        round.mask_pairs.extend(masks.iter().map(|m| (m.origin.clone(), m.destination.clone())));
        let bucket = if entry.kind == FrameKind::ToCoordinator { &mut round.uploads } else { &mut round.downloads };
        *bucket.entry(phase).or_default() += 1;
    }
    Ok(rounds)
}

/// Uploads from each participant to the coordinator, excluding control
/// frames.
pub fn data_uploads(transcript: &[TranscriptEntry]) -> BTreeMap<ClientId, usize> {
    let mut out = BTreeMap::new();
    for e in transcript.iter().filter(|e| e.kind == FrameKind::ToCoordinator) {
        *out.entry(e.sender.clone()).or_default() += 1;
    }
    out
}

pub fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Transcript entries whose encoded bytes contain `needle`.
pub fn occurrences<'a>(transcript: &'a [TranscriptEntry], needle: &[u8]) -> Vec<&'a TranscriptEntry> {
    transcript.iter().filter(|e| contains(&e.encoded, needle)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substring_scan() {
        assert!(contains(b"abcSENTINELdef", b"SENTINEL"));
        assert!(!contains(b"abcSENTINEdef", b"SENTINEL"));
        assert!(!contains(b"abc", b""));
        assert!(!contains(b"ab", b"abc"));
    }
}
