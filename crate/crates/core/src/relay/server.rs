//! TCP front end for [`Relay`].
//!
//! One reader thread per connection feeds frames into the shared routing
//! state; one writer thread per connection drains that member's outbound
//! queue, paced by the optional downlink limit.

use std::collections::HashMap;
use std::io::{self, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread;

use log::{debug, info, warn};

use super::{Relay, RelayError, SessionHandle, TrafficReport, TranscriptEntry};
use crate::protocol::{self, control, ClientId, Frame, Role, ATTR_CREDENTIALS, ATTR_REASON, ATTR_ROLE};
use crate::throttle::{self, Link};

#[derive(Debug, Clone, Default)]
pub struct RelayOptions {
    /// Per-member downlink limit in bytes per second.
    pub bandwidth_limit: Option<u64>,
    pub record_transcript: bool,
}

type Outbox = Sender<Arc<Vec<u8>>>;

struct Shared {
    relay: Mutex<Relay>,
    outboxes: Mutex<HashMap<(String, ClientId), Outbox>>,
    closed: Mutex<HashMap<String, TrafficReport>>,
    options: RelayOptions,
    stopping: AtomicBool,
}

pub struct RelayServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<thread::JoinHandle<()>>,
}

impl RelayServer {
    pub fn bind(addr: impl ToSocketAddrs, options: RelayOptions) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let relay = if options.record_transcript { Relay::with_transcript() } else { Relay::new() };
        let shared = Arc::new(Shared {
            relay: Mutex::new(relay),
            outboxes: Mutex::new(HashMap::new()),
            closed: Mutex::new(HashMap::new()),
            options,
            stopping: AtomicBool::new(false),
        });
        let accept_shared = shared.clone();
        let accept = thread::Builder::new().name("relay-accept".into()).spawn(move || {
            for stream in listener.incoming() {
                if accept_shared.stopping.load(Ordering::SeqCst) {
                    break;
                }
                match stream {
                    Ok(stream) => {
                        let shared = accept_shared.clone();
                        thread::spawn(move || {
                            if let Err(e) = serve_connection(shared, stream) {
                                debug!("relay connection ended: {e}");
                            }
                        });
                    }
                    Err(e) => warn!("relay accept failed: {e}"),
                }
            }
        })?;
        info!("relay listening on {addr}");
        Ok(Self { addr, shared, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Traffic report of a workflow closed by its coordinator, if any.
    pub fn closed_report(&self, workflow_id: &str) -> Option<TrafficReport> {
        self.shared.closed.lock().unwrap().get(workflow_id).cloned()
    }

    /// Closes a workflow from the relay side.
    pub fn close_workflow(&self, workflow_id: &str) -> Result<TrafficReport, RelayError> {
        close_session(&self.shared, workflow_id)
    }

    pub fn transcript(&self, workflow_id: &str) -> Vec<TranscriptEntry> {
        self.shared.relay.lock().unwrap().transcript().iter().filter(|e| e.workflow_id == workflow_id).cloned().collect()
    }

    pub fn take_transcript(&self, workflow_id: &str) -> Vec<TranscriptEntry> {
        self.shared.relay.lock().unwrap().take_transcript(workflow_id)
    }

    pub fn shutdown(&mut self) {
        if self.shared.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.accept.take() {
            let _ = handle.join();
        }
        self.shared.outboxes.lock().unwrap().clear();
    }
}

impl Drop for RelayServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn relay_frame(workflow_id: &str, verb: &str) -> Frame {
    Frame::control(workflow_id, ClientId::relay(), verb)
}

fn send_to(shared: &Shared, workflow_id: &str, to: &ClientId, bytes: Arc<Vec<u8>>) {
    if let Some(outbox) = shared.outboxes.lock().unwrap().get(&(workflow_id.to_string(), to.clone())) {
        let _ = outbox.send(bytes);
    }
}

fn send_frame(shared: &Shared, workflow_id: &str, to: &ClientId, frame: &Frame) {
    match protocol::encode_frame(frame) {
        Ok(bytes) => send_to(shared, workflow_id, to, Arc::new(bytes)),
        Err(e) => warn!("relay could not encode notice: {e}"),
    }
}

fn close_session(shared: &Shared, workflow_id: &str) -> Result<TrafficReport, RelayError> {
    let members: Vec<ClientId> = {
        let relay = shared.relay.lock().unwrap();
        relay.session(workflow_id).map(|s| s.members.iter().map(|(id, _)| id.clone()).collect()).unwrap_or_default()
    };
    let report = shared.relay.lock().unwrap().close_workflow(workflow_id)?;
    let payload = serde_json::to_vec(&report).expect("traffic report serializes");
    let notice = Frame { payload, ..relay_frame(workflow_id, control::CLOSED) };
    for m in &members {
        send_frame(shared, workflow_id, m, &notice);
    }
    shared.closed.lock().unwrap().insert(workflow_id.to_string(), report.clone());
    info!("workflow {workflow_id} closed");
    Ok(report)
}

fn spawn_writer(mut stream: TcpStream, link: Link) -> Outbox {
    let (tx, rx) = mpsc::channel::<Arc<Vec<u8>>>();
    thread::spawn(move || {
        for bytes in rx {
            link.pace(bytes.len());
            if stream.write_all(&bytes).is_err() {
                break;
            }
        }
        let _ = stream.shutdown(Shutdown::Write);
    });
    tx
}

fn register(shared: &Shared, first: &Frame) -> Result<SessionHandle, RelayError> {
    if first.control_verb() != Some(control::REGISTER) {
        return Err(RelayError::Protocol(protocol::ProtocolError::Invalid(
            "first frame must be a register control frame".into(),
        )));
    }
    let role: Role = first
        .attr(ATTR_ROLE)
        .ok_or_else(|| protocol::ProtocolError::Invalid("register frame lacks a role".into()))?
        .parse()?;
    let credentials = first.attr(ATTR_CREDENTIALS).unwrap_or_default();
    shared.relay.lock().unwrap().register_client(&first.workflow_id, credentials, first.sender.clone(), role)
}

fn serve_connection(shared: Arc<Shared>, stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = stream.try_clone()?;
    let mut link = Link::unlimited();
    throttle::throttle(&mut link, shared.options.bandwidth_limit);

    let Some((first, _)) = protocol::read_frame(&mut reader)? else {
        return Ok(());
    };
    let handle = match register(&shared, &first) {
        Ok(handle) => handle,
        Err(e) => {
            let retry = if e.is_retryable() { "true" } else { "false" };
            let reject =
                relay_frame(&first.workflow_id, control::REJECTED).with_attr(ATTR_REASON, e.to_string()).with_attr("retry", retry);
            let mut stream = stream;
            stream.write_all(&protocol::encode_frame(&reject).expect("notice encodes"))?;
            return Ok(());
        }
    };
    let wf = handle.workflow_id.clone();
    let outbox = spawn_writer(stream, link);
    shared.outboxes.lock().unwrap().insert((wf.clone(), handle.client_id.clone()), outbox);
    send_frame(&shared, &wf, &handle.client_id, &relay_frame(&wf, control::REGISTERED));
    if handle.role == Role::Participant {
        let coordinator = shared.relay.lock().unwrap().session(&wf).and_then(|s| s.coordinator().cloned());
        if let Some(c) = coordinator {
            let notice = relay_frame(&wf, control::JOINED).with_attr("client", handle.client_id.as_str());
            send_frame(&shared, &wf, &c, &notice);
        }
    }
    debug!("{} registered in {wf} as {}", handle.client_id, handle.role);

    let result = read_loop(&shared, &handle, &mut reader);

    shared.outboxes.lock().unwrap().remove(&(wf.clone(), handle.client_id.clone()));
    let notify = {
        let mut relay = shared.relay.lock().unwrap();
        if relay.session(&wf).is_some() { relay.mark_failed(&wf, &handle.client_id) } else { Vec::new() }
    };
    if !notify.is_empty() {
        warn!("{} dropped out of workflow {wf}", handle.client_id);
        let notice = relay_frame(&wf, control::FAILED).with_attr("client", handle.client_id.as_str());
        for m in &notify {
            send_frame(&shared, &wf, m, &notice);
        }
    }
    result
}

fn read_loop(shared: &Shared, handle: &SessionHandle, reader: &mut TcpStream) -> io::Result<()> {
    let wf = &handle.workflow_id;
    while let Some((frame, _)) = protocol::read_frame(reader)? {
        if handle.role == Role::Coordinator && frame.control_verb() == Some(control::CLOSE) {
            if let Err(e) = close_session(shared, wf) {
                warn!("close of {wf} failed: {e}");
            }
            continue;
        }
        let routed = shared.relay.lock().unwrap().route_recipients(&frame, handle);
        match routed {
            Ok(recipients) => {
                let bytes = Arc::new(protocol::encode_frame(&frame).expect("routed frame encodes"));
                for r in &recipients {
                    send_to(shared, wf, r, bytes.clone());
                }
            }
            Err(e) => {
                warn!("relay rejected frame from {}: {e}", handle.client_id);
                let reject = relay_frame(wf, control::REJECTED).with_attr(ATTR_REASON, e.to_string());
                send_frame(shared, wf, &handle.client_id, &reject);
            }
        }
    }
    Ok(())
}
