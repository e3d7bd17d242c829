//! Client side of a relay connection.

use std::io::{self, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::protocol::{self, control, ClientId, Frame, ProtocolError, Role, ATTR_CREDENTIALS, ATTR_REASON, ATTR_ROLE};
use crate::throttle::{self, Link};

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("relay connection failed: {0}")]
    Io(#[from] io::Error),
    #[error("relay rejected registration: {0}")]
    Rejected(String),
    #[error("timed out registering with relay at {0}")]
    Timeout(SocketAddr),
    #[error("relay connection closed")]
    Disconnected,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone)]
pub struct ConnectOptions {
    pub workflow_id: String,
    pub credentials: String,
    pub client_id: ClientId,
    pub role: Role,
    /// Uplink limit in bytes per second.
    pub bandwidth_limit: Option<u64>,
    /// How long to keep retrying while the workflow does not exist yet.
    pub register_timeout: Duration,
}

/// A registered connection to the relay.
pub struct RelayClient {
    options: ConnectOptions,
    writer: Mutex<TcpStream>,
    uplink: Link,
    incoming: Mutex<Receiver<Frame>>,
    bytes_sent: AtomicU64,
    bytes_received: Arc<AtomicU64>,
}

impl RelayClient {
    pub fn connect(addr: SocketAddr, options: ConnectOptions) -> Result<Self, LinkError> {
        let deadline = Instant::now() + options.register_timeout;
        loop {
            let mut stream = TcpStream::connect(addr)?;
            stream.set_nodelay(true)?;
            let register = Frame::control(&options.workflow_id, options.client_id.clone(), control::REGISTER)
                .with_attr(ATTR_ROLE, options.role.to_string())
                .with_attr(ATTR_CREDENTIALS, options.credentials.clone());
            stream.write_all(&protocol::encode_frame(&register)?)?;
            let mut reader = stream.try_clone()?;
            let reply = protocol::read_frame(&mut reader)?.ok_or(LinkError::Disconnected)?.0;
            match reply.control_verb() {
                Some(control::REGISTERED) => {
                    let mut uplink = Link::unlimited();
                    throttle::throttle(&mut uplink, options.bandwidth_limit);
                    let bytes_received = Arc::new(AtomicU64::new(0));
                    let incoming = spawn_reader(reader, bytes_received.clone());
                    return Ok(Self {
                        options,
                        writer: Mutex::new(stream),
                        uplink,
                        incoming: Mutex::new(incoming),
                        bytes_sent: AtomicU64::new(0),
                        bytes_received,
                    });
                }
                Some(control::REJECTED) if reply.attr("retry") == Some("true") && Instant::now() < deadline => {
                    thread::sleep(Duration::from_millis(10));
                }
                Some(control::REJECTED) if reply.attr("retry") == Some("true") => return Err(LinkError::Timeout(addr)),
                _ => return Err(LinkError::Rejected(reply.attr(ATTR_REASON).unwrap_or("unexpected reply").to_string())),
            }
        }
    }

    pub fn client_id(&self) -> &ClientId {
        &self.options.client_id
    }

    pub fn workflow_id(&self) -> &str {
        &self.options.workflow_id
    }

    pub fn role(&self) -> Role {
        self.options.role
    }

    /// Sends a frame, blocking while the uplink is occupied. Returns the
    /// number of encoded bytes written.
    pub fn send(&self, frame: &Frame) -> Result<usize, LinkError> {
        let bytes = protocol::encode_frame(frame)?;
        let mut writer = self.writer.lock().unwrap();
        self.uplink.pace(bytes.len());
        writer.write_all(&bytes)?;
        self.bytes_sent.fetch_add(bytes.len() as u64, Ordering::Relaxed);
        Ok(bytes.len())
    }

    /// Waits up to `timeout` for the next incoming frame.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Frame>, LinkError> {
        match self.incoming.lock().unwrap().recv_timeout(timeout) {
            Ok(frame) => Ok(Some(frame)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(LinkError::Disconnected),
        }
    }

    pub fn try_recv(&self) -> Result<Option<Frame>, LinkError> {
        self.recv_timeout(Duration::ZERO)
    }

    /// Raw bytes this client wrote to and read from its socket.
    pub fn wire_bytes(&self) -> (u64, u64) {
        (self.bytes_sent.load(Ordering::Relaxed), self.bytes_received.load(Ordering::Relaxed))
    }
}

impl Drop for RelayClient {
    fn drop(&mut self) {
        // The reader thread holds a clone of the socket; shutting down closes
        // the connection for both.
        if let Ok(stream) = self.writer.lock() {
            let _ = stream.shutdown(std::net::Shutdown::Both);
        }
    }
}

fn spawn_reader(mut reader: TcpStream, counter: Arc<AtomicU64>) -> Receiver<Frame> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        while let Ok(Some((frame, n))) = protocol::read_frame(&mut reader) {
            counter.fetch_add(n as u64, Ordering::Relaxed);
            if tx.send(frame).is_err() {
                break;
            }
        }
    });
    rx
}
