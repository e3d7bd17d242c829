//! Loopback HTTP adapter exposing an [`App`] through the documented endpoints
//! `POST /setup`, `GET /status`, `GET /data` and `POST /data?client=<id>`,
//! plus [`HttpApp`], the matching client used to drive a remote app.

use std::io::Read;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use tiny_http::{Header, Method, Response, Server};

use super::{App, AppConfig, AppError, AppResult, SetupContext, SetupInfo, StatusReport, StepLog};
use crate::protocol::ClientId;

/// Directories and configuration the served app is set up with; the
/// `POST /setup` body only carries identity and role.
#[derive(Debug, Clone)]
pub struct HttpAppEnv {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub config: AppConfig,
    pub log: StepLog,
}

pub struct HttpAdapter {
    addr: SocketAddr,
    server: Arc<Server>,
    stop: Arc<AtomicBool>,
    worker: Option<thread::JoinHandle<()>>,
}

impl HttpAdapter {
    pub fn serve(app: Box<dyn App>, addr: &str, env: HttpAppEnv) -> std::io::Result<Self> {
        let server = Server::http(addr).map_err(|e| std::io::Error::other(e.to_string()))?;
        let addr = server.server_addr().to_ip().ok_or_else(|| std::io::Error::other("not an ip listener"))?;
        let server = Arc::new(server);
        let stop = Arc::new(AtomicBool::new(false));
        let app = Arc::new(Mutex::new(app));
        let (srv, flag) = (server.clone(), stop.clone());
        let worker = thread::spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                match srv.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(request)) => handle(&app, &env, request),
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
        });
        Ok(Self { addr, server, stop, worker: Some(worker) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for HttpAdapter {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn query_param<'a>(url: &'a str, key: &str) -> Option<&'a str> {
    let query = url.split_once('?')?.1;
    query.split('&').filter_map(|kv| kv.split_once('=')).find(|(k, _)| *k == key).map(|(_, v)| v)
}

fn json_header() -> Header {
    Header::from_bytes("Content-Type", "application/json").unwrap()
}

fn error_response(e: AppError) -> Response<std::io::Cursor<Vec<u8>>> {
    let code = match e {
        AppError::Contract(_) => 409,
        AppError::Setup(_) => 400,
        _ => 500,
    };
    Response::from_string(e.to_string()).with_status_code(code)
}

fn handle(app: &Mutex<Box<dyn App>>, env: &HttpAppEnv, mut request: tiny_http::Request) {
    let path = request.url().split('?').next().unwrap_or("").to_string();
    let mut body = Vec::new();
    if request.as_reader().read_to_end(&mut body).is_err() {
        let _ = request.respond(Response::from_string("unreadable body").with_status_code(400));
        return;
    }
    let mut app = app.lock().unwrap();
    let response = match (request.method(), path.as_str()) {
        (Method::Post, "/setup") => match serde_json::from_slice::<SetupInfo>(&body) {
            Ok(info) => {
                let ctx = SetupContext {
                    info,
                    input_dir: env.input_dir.clone(),
                    output_dir: env.output_dir.clone(),
                    config: env.config.clone(),
                    log: env.log.clone(),
                };
                match app.setup(ctx) {
                    Ok(()) => Response::from_string(""),
                    Err(e) => error_response(e),
                }
            }
            Err(e) => Response::from_string(format!("bad setup body: {e}")).with_status_code(400),
        },
        (Method::Get, "/status") => {
            Response::from_data(serde_json::to_vec(&app.status()).expect("status serializes")).with_header(json_header())
        }
        (Method::Get, "/data") => match app.fetch_outgoing() {
            Ok(bytes) => Response::from_data(bytes),
            Err(e) => error_response(e),
        },
        (Method::Post, "/data") => {
            let from = match query_param(request.url(), "client").map(ClientId::new) {
                None => Ok(None),
                Some(Ok(id)) => Ok(Some(id)),
                Some(Err(e)) => Err(e),
            };
            match from {
                Ok(from) => match app.deliver_incoming(body, from) {
                    Ok(()) => Response::from_string(""),
                    Err(e) => error_response(e),
                },
                Err(e) => Response::from_string(e.to_string()).with_status_code(400),
            }
        }
        _ => Response::from_string("not found").with_status_code(404),
    };
    let _ = request.respond(response);
}

/// Drives an app served over HTTP as if it were in-process.
///
/// The remote app's directories and configuration are fixed by the server;
/// only the identity part of the setup context is transmitted.
pub struct HttpApp {
    base: String,
    agent: ureq::Agent,
}

impl HttpApp {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self { base: base_url.into(), agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build() }
    }

    fn call_err(e: ureq::Error) -> AppError {
        match e {
            ureq::Error::Status(409, r) => AppError::Contract(r.into_string().unwrap_or_default()),
            ureq::Error::Status(400, r) => AppError::Setup(r.into_string().unwrap_or_default()),
            ureq::Error::Status(_, r) => AppError::Failure(r.into_string().unwrap_or_default()),
            other => AppError::Failure(other.to_string()),
        }
    }
}

impl App for HttpApp {
    fn setup(&mut self, ctx: SetupContext) -> AppResult<()> {
        let body = serde_json::to_vec(&ctx.info).expect("setup info serializes");
        self.agent.post(&format!("{}/setup", self.base)).send_bytes(&body).map_err(Self::call_err)?;
        Ok(())
    }

    fn status(&self) -> StatusReport {
        // An unreachable app reports nothing to do; the controller's step
        // timeout turns a dead app into a step failure.
        self.agent
            .get(&format!("{}/status", self.base))
            .call()
            .ok()
            .and_then(|r| r.into_json().ok())
            .unwrap_or_default()
    }

    fn fetch_outgoing(&mut self) -> AppResult<Vec<u8>> {
        let response = self.agent.get(&format!("{}/data", self.base)).call().map_err(Self::call_err)?;
        let mut bytes = Vec::new();
        response.into_reader().read_to_end(&mut bytes).map_err(|e| AppError::Failure(e.to_string()))?;
        Ok(bytes)
    }

    fn deliver_incoming(&mut self, data: Vec<u8>, from: Option<ClientId>) -> AppResult<()> {
        let mut url = format!("{}/data", self.base);
        if let Some(id) = from {
            url.push_str(&format!("?client={id}"));
        }
        self.agent.post(&url).send_bytes(&data).map_err(Self::call_err)?;
        Ok(())
    }
}
