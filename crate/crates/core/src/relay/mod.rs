//! Star-topology relay: participant frames go to the coordinator, coordinator
//! frames go to every participant.
//!
//! [`Relay`] holds the routing state and is transport independent; the TCP
//! front end lives in [`server`].

pub mod server;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{control, ClientId, Frame, FrameKind, ProtocolError, Role, WorkflowSession};

pub use server::{RelayOptions, RelayServer};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RelayError {
    #[error("bad credentials for workflow {0}")]
    Auth(String),
    #[error("workflow {0} already has a coordinator")]
    Topology(String),
    #[error("client {client} already registered in workflow {workflow}")]
    Conflict { workflow: String, client: ClientId },
    #[error("unknown workflow {0}")]
    NotFound(String),
    #[error("workflow {0} has started; late joins are not allowed")]
    LateJoin(String),
    #[error("client id {0} is reserved")]
    Reserved(ClientId),
    #[error("client {0} is not registered in this session")]
    Unregistered(ClientId),
    #[error("frame sender {claimed} does not match connection identity {actual}")]
    Spoofed { claimed: ClientId, actual: ClientId },
    #[error("{role} may not send {kind:?} frames")]
    IllegalKind { role: Role, kind: FrameKind },
    #[error("recipient {0} is not a participant of this session")]
    BadRecipient(ClientId),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

impl RelayError {
    /// Whether a registering client should retry later.
    pub fn is_retryable(&self) -> bool {
        matches!(self, RelayError::NotFound(_))
    }
}

/// Identity of a registered connection.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SessionHandle {
    pub workflow_id: String,
    pub client_id: ClientId,
    pub role: Role,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub bytes_out: u64,
    pub bytes_in: u64,
    pub frames_out: u64,
    pub frames_in: u64,
}

pub type TrafficReport = BTreeMap<ClientId, Traffic>;

/// One routed frame as seen by the relay.
#[derive(Debug, Clone)]
pub struct TranscriptEntry {
    pub workflow_id: String,
    pub sender: ClientId,
    pub kind: FrameKind,
    pub recipients: Vec<ClientId>,
    pub encoded: Vec<u8>,
}

#[derive(Debug)]
struct SessionState {
    session: WorkflowSession,
    started: bool,
    failed: bool,
    traffic: TrafficReport,
}

#[derive(Debug, Default)]
pub struct Relay {
    sessions: HashMap<String, SessionState>,
    transcript: Option<Vec<TranscriptEntry>>,
}

impl Relay {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps a copy of every routed frame for later inspection.
    pub fn with_transcript() -> Self {
        Self { sessions: HashMap::new(), transcript: Some(Vec::new()) }
    }

    pub fn register_client(
        &mut self,
        workflow_id: &str,
        credentials: &str,
        client_id: ClientId,
        role: Role,
    ) -> Result<SessionHandle, RelayError> {
        if client_id.as_str().starts_with('@') {
            return Err(RelayError::Reserved(client_id));
        }
        match self.sessions.get_mut(workflow_id) {
            None if role.is_coordinator() => {
                let mut traffic = TrafficReport::new();
                traffic.insert(client_id.clone(), Traffic::default());
                self.sessions.insert(
                    workflow_id.to_string(),
                    SessionState {
                        session: WorkflowSession {
                            workflow_id: workflow_id.to_string(),
                            credentials: credentials.to_string(),
                            members: vec![(client_id.clone(), role)],
                        },
                        started: false,
                        failed: false,
                        traffic,
                    },
                );
            }
            None => return Err(RelayError::NotFound(workflow_id.to_string())),
            Some(state) => {
                if state.session.credentials != credentials {
                    return Err(RelayError::Auth(workflow_id.to_string()));
                }
                if role.is_coordinator() {
                    return Err(RelayError::Topology(workflow_id.to_string()));
                }
                if state.session.role_of(&client_id).is_some() {
                    return Err(RelayError::Conflict { workflow: workflow_id.to_string(), client: client_id });
                }
                if state.started {
                    return Err(RelayError::LateJoin(workflow_id.to_string()));
                }
                state.session.members.push((client_id.clone(), role));
                state.traffic.insert(client_id.clone(), Traffic::default());
            }
        }
        Ok(SessionHandle { workflow_id: workflow_id.to_string(), client_id, role })
    }

    pub fn session(&self, workflow_id: &str) -> Option<&WorkflowSession> {
        self.sessions.get(workflow_id).map(|s| &s.session)
    }

    pub fn is_failed(&self, workflow_id: &str) -> bool {
        self.sessions.get(workflow_id).is_some_and(|s| s.failed)
    }

    /// Routes a frame and returns one delivery per receiver.
    pub fn route(&mut self, frame: &Frame, sender: &SessionHandle) -> Result<Vec<(ClientId, Frame)>, RelayError> {
        let recipients = self.route_recipients(frame, sender)?;
        Ok(recipients.into_iter().map(|r| (r, frame.clone())).collect())
    }

    /// Routing decision plus counter update, without cloning the frame.
    pub fn route_recipients(&mut self, frame: &Frame, sender: &SessionHandle) -> Result<Vec<ClientId>, RelayError> {
        let encoded_len = frame.encoded_len()? as u64;
        let state = self
            .sessions
            .get_mut(&sender.workflow_id)
            .ok_or_else(|| RelayError::NotFound(sender.workflow_id.clone()))?;
        let role = state
            .session
            .role_of(&sender.client_id)
            .ok_or_else(|| RelayError::Unregistered(sender.client_id.clone()))?;
        if frame.sender != sender.client_id || frame.workflow_id != sender.workflow_id {
            return Err(RelayError::Spoofed { claimed: frame.sender.clone(), actual: sender.client_id.clone() });
        }
        frame.validate()?;

        let recipients: Vec<ClientId> = match (role, frame.kind) {
            (Role::Participant, FrameKind::ToCoordinator | FrameKind::Control) => {
                state.session.coordinator().cloned().into_iter().collect()
            }
            (Role::Coordinator, FrameKind::Broadcast | FrameKind::Control) => match &frame.recipient {
                Some(r) => {
                    if state.session.role_of(r) != Some(Role::Participant) {
                        return Err(RelayError::BadRecipient(r.clone()));
                    }
                    vec![r.clone()]
                }
                None => state.session.participants().cloned().collect(),
            },
            (role, kind) => return Err(RelayError::IllegalKind { role, kind }),
        };

        if role.is_coordinator() && frame.control_verb() == Some(control::START) {
            state.started = true;
        }

        for r in &recipients {
            let out = state.traffic.get_mut(&sender.client_id).expect("member has counters");
            out.bytes_out += encoded_len;
            out.frames_out += 1;
            let inc = state.traffic.get_mut(r).expect("member has counters");
            inc.bytes_in += encoded_len;
            inc.frames_in += 1;
        }
        if let Some(transcript) = &mut self.transcript {
            transcript.push(TranscriptEntry {
                workflow_id: sender.workflow_id.clone(),
                sender: sender.client_id.clone(),
                kind: frame.kind,
                recipients: recipients.clone(),
                encoded: crate::protocol::encode_frame(frame)?,
            });
        }
        Ok(recipients)
    }

    /// Marks the session failed after `client` lost its connection and
    /// returns the members that should be told.
    pub fn mark_failed(&mut self, workflow_id: &str, client: &ClientId) -> Vec<ClientId> {
        match self.sessions.get_mut(workflow_id) {
            Some(state) => {
                state.failed = true;
                state.session.members.iter().map(|(id, _)| id).filter(|id| *id != client).cloned().collect()
            }
            None => Vec::new(),
        }
    }

    /// Releases the session and returns its frozen traffic counters.
    pub fn close_workflow(&mut self, workflow_id: &str) -> Result<TrafficReport, RelayError> {
        self.sessions
            .remove(workflow_id)
            .map(|s| s.traffic)
            .ok_or_else(|| RelayError::NotFound(workflow_id.to_string()))
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        self.transcript.as_deref().unwrap_or(&[])
    }

    pub fn take_transcript(&mut self, workflow_id: &str) -> Vec<TranscriptEntry> {
        match &mut self.transcript {
            Some(t) => {
                let (mine, rest): (Vec<_>, Vec<_>) = std::mem::take(t).into_iter().partition(|e| e.workflow_id == workflow_id);
                *t = rest;
                mine
            }
            None => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> ClientId {
        ClientId::from(s)
    }

    fn star() -> (Relay, SessionHandle, SessionHandle, SessionHandle) {
        let mut relay = Relay::new();
        let c = relay.register_client("wf", "pw", id("C"), Role::Coordinator).unwrap();
        let p1 = relay.register_client("wf", "pw", id("P1"), Role::Participant).unwrap();
        let p2 = relay.register_client("wf", "pw", id("P2"), Role::Participant).unwrap();
        (relay, c, p1, p2)
    }

    fn data(sender: &str, kind: FrameKind) -> Frame {
        Frame::new("wf", id(sender), kind, vec![1, 2, 3])
    }

    #[test]
    fn first_coordinator_creates_session() {
        let mut relay = Relay::new();
        relay.register_client("wf", "pw", id("C"), Role::Coordinator).unwrap();
        assert_eq!(relay.session("wf").unwrap().n_participants(), 1);
    }

    #[test]
    fn registration_errors() {
        let (mut relay, ..) = star();
        assert_eq!(
            relay.register_client("wf", "pw", id("C2"), Role::Coordinator),
            Err(RelayError::Topology("wf".into()))
        );
        assert_eq!(relay.register_client("wf", "nope", id("P3"), Role::Participant), Err(RelayError::Auth("wf".into())));
        assert_eq!(relay.session("wf").unwrap().n_participants(), 3);
        assert!(matches!(
            relay.register_client("wf", "pw", id("P1"), Role::Participant),
            Err(RelayError::Conflict { .. })
        ));
        assert_eq!(relay.register_client("other", "pw", id("P"), Role::Participant), Err(RelayError::NotFound("other".into())));
        assert!(matches!(relay.register_client("wf", "pw", id("@x"), Role::Participant), Err(RelayError::Reserved(_))));
    }

    #[test]
    fn participant_goes_to_coordinator_only() {
        let (mut relay, _, p1, _) = star();
        let out = relay.route(&data("P1", FrameKind::ToCoordinator), &p1).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, id("C"));
        assert_eq!(out[0].1.sender, id("P1"));
    }

    #[test]
    fn coordinator_broadcasts_to_all_participants() {
        let (mut relay, c, ..) = star();
        let out = relay.route(&data("C", FrameKind::Broadcast), &c).unwrap();
        let to: Vec<_> = out.iter().map(|(r, _)| r.clone()).collect();
        assert_eq!(to, vec![id("P1"), id("P2")]);
    }

    #[test]
    fn directed_coordinator_frame() {
        let (mut relay, c, ..) = star();
        let f = data("C", FrameKind::Broadcast).with_recipient(id("P2"));
        assert_eq!(relay.route_recipients(&f, &c).unwrap(), vec![id("P2")]);
        let f = data("C", FrameKind::Broadcast).with_recipient(id("C"));
        assert_eq!(relay.route_recipients(&f, &c), Err(RelayError::BadRecipient(id("C"))));
    }

    #[test]
    fn solo_broadcast_goes_nowhere() {
        let mut relay = Relay::new();
        let c = relay.register_client("wf", "pw", id("C"), Role::Coordinator).unwrap();
        assert!(relay.route(&data("C", FrameKind::Broadcast), &c).unwrap().is_empty());
    }

    #[test]
    fn spoofing_and_illegal_kinds_rejected() {
        let (mut relay, c, p1, _) = star();
        assert!(matches!(relay.route(&data("P2", FrameKind::ToCoordinator), &p1), Err(RelayError::Spoofed { .. })));
        assert!(matches!(relay.route(&data("P1", FrameKind::Broadcast), &p1), Err(RelayError::IllegalKind { .. })));
        assert!(matches!(relay.route(&data("C", FrameKind::ToCoordinator), &c), Err(RelayError::IllegalKind { .. })));
        let ghost = SessionHandle { workflow_id: "wf".into(), client_id: id("P9"), role: Role::Participant };
        assert!(matches!(relay.route(&data("P9", FrameKind::ToCoordinator), &ghost), Err(RelayError::Unregistered(_))));
    }

    #[test]
    fn start_locks_membership() {
        let (mut relay, c, ..) = star();
        relay.route(&Frame::control("wf", id("C"), control::START), &c).unwrap();
        assert_eq!(relay.register_client("wf", "pw", id("P3"), Role::Participant), Err(RelayError::LateJoin("wf".into())));
    }

    #[test]
    fn close_reports_counters() {
        let (mut relay, _, p1, _) = star();
        let frame = data("P1", FrameKind::ToCoordinator);
        let size = frame.encoded_len().unwrap() as u64;
        relay.route(&frame, &p1).unwrap();
        let report = relay.close_workflow("wf").unwrap();
        assert_eq!(report[&id("P1")].bytes_out, size);
        assert_eq!(report[&id("C")].bytes_in, size);
        assert_eq!(report[&id("P2")], Traffic::default());
        assert_eq!(relay.close_workflow("wf"), Err(RelayError::NotFound("wf".into())));
    }

    #[test]
    fn close_after_zero_frames_is_all_zero() {
        let (mut relay, ..) = star();
        let report = relay.close_workflow("wf").unwrap();
        assert_eq!(report.len(), 3);
        assert!(report.values().all(|t| *t == Traffic::default()));
    }

    #[test]
    fn hundred_byte_frame_counts_exactly() {
        let (mut relay, _, p1, _) = star();
        let mut frame = data("P1", FrameKind::ToCoordinator);
        let overhead = frame.encoded_len().unwrap() - frame.payload.len();
        frame.payload = vec![0; 100 - overhead];
        assert_eq!(frame.encoded_len().unwrap(), 100);
        relay.route(&frame, &p1).unwrap();
        let report = relay.close_workflow("wf").unwrap();
        assert_eq!((report[&id("P1")].bytes_out, report[&id("C")].bytes_in), (100, 100));
    }

    #[test]
    fn failure_notifies_remaining_members() {
        let (mut relay, ..) = star();
        let notify = relay.mark_failed("wf", &id("P1"));
        assert_eq!(notify, vec![id("C"), id("P2")]);
        assert!(relay.is_failed("wf"));
    }
}
