use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};

use super::{Agent, AgentError, X509Response};
use crate::clock::Clock;
use crate::crypto::JwtSvid;
use crate::wire::{decode_request, read_frame, write_frame, Response, WireError};

/// Environment variable naming the Workload API address.
pub const AGENT_ADDR_ENV: &str = "MINISPIFFE_AGENT_ADDR";

/// First frame on a connection; binds it to a handle for its lifetime.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Hello {
    handle: String,
}

/// Requests after the hello frame. Unknown fields are ignored, so any
/// selectors a caller volunteers have no effect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum WorkloadRequest {
    FetchX509,
    FetchJwt { aud: Vec<String> },
}

fn respond<T: Serialize>(r: Result<T, AgentError>) -> Response {
    match r {
        Ok(v) => Response::success(&v),
        Err(e) => Response::failure(e.code(), e.to_string()),
    }
}

impl Agent {
    /// Serves one Workload API frame for a connection bound to `handle`.
    pub fn handle_workload_frame(&self, handle: &str, frame: &[u8], now: i64) -> Vec<u8> {
        let resp = match decode_request::<WorkloadRequest>(frame) {
            Err(resp) => resp,
            Ok(WorkloadRequest::FetchX509) => respond(self.fetch_x509(handle, now)),
            Ok(WorkloadRequest::FetchJwt { aud }) => respond(self.fetch_jwt(handle, &aud, now)),
        };
        resp.to_bytes()
    }
}

fn serve_connection(agent: &Agent, stream: &mut TcpStream, clock: &dyn Clock) {
    let handle = match read_frame(stream) {
        Ok(Some(frame)) => match decode_request::<Hello>(&frame) {
            Ok(h) => h.handle,
            Err(resp) => {
                let _ = write_frame(stream, &resp.to_bytes());
                return;
            }
        },
        _ => return,
    };
    if write_frame(stream, &Response::success(&()).to_bytes()).is_err() {
        return;
    }
    while let Ok(Some(frame)) = read_frame(stream) {
        let reply = agent.handle_workload_frame(&handle, &frame, clock.now());
        if write_frame(stream, &reply).is_err() {
            break;
        }
    }
}

/// Plain-TCP Workload API. Callers are unauthenticated; non-loopback peers
/// are dropped.
pub fn serve_workload_api(agent: Arc<Agent>, listener: TcpListener, clock: Arc<dyn Clock>) {
    for stream in listener.incoming() {
        let Ok(mut stream) = stream else { continue };
        if !stream.peer_addr().is_ok_and(|a| a.ip().is_loopback()) {
            continue;
        }
        let (agent, clock) = (agent.clone(), clock.clone());
        thread::spawn(move || serve_connection(&agent, &mut stream, clock.as_ref()));
    }
}

/// Workload-side client for one bound connection.
pub struct WorkloadClient {
    stream: TcpStream,
}

impl WorkloadClient {
    pub fn connect(addr: impl ToSocketAddrs, handle: &str) -> Result<Self, WireError> {
        let mut stream = TcpStream::connect(addr).map_err(io_error)?;
        let hello = serde_json::to_vec(&Hello {
            handle: handle.to_owned(),
        })
        .expect("hello serializes");
        exchange::<()>(&mut stream, &hello)?;
        Ok(WorkloadClient { stream })
    }

    /// Connects to the address in `MINISPIFFE_AGENT_ADDR`.
    pub fn from_env(handle: &str) -> Result<Self, WireError> {
        let addr = std::env::var(AGENT_ADDR_ENV).map_err(|_| WireError {
            code: "NoAgentAddress".to_owned(),
            message: format!("{AGENT_ADDR_ENV} is not set"),
        })?;
        Self::connect(addr.as_str(), handle)
    }

    pub fn fetch_x509(&mut self) -> Result<X509Response, WireError> {
        self.send(&WorkloadRequest::FetchX509)
    }

    pub fn fetch_jwt(&mut self, aud: &[String]) -> Result<Vec<JwtSvid>, WireError> {
        self.send(&WorkloadRequest::FetchJwt { aud: aud.to_vec() })
    }

    fn send<T: serde::de::DeserializeOwned>(
        &mut self,
        req: &WorkloadRequest,
    ) -> Result<T, WireError> {
        let frame = serde_json::to_vec(req).expect("request serializes");
        exchange(&mut self.stream, &frame)
    }
}

fn io_error(e: std::io::Error) -> WireError {
    WireError {
        code: "Io".to_owned(),
        message: e.to_string(),
    }
}

fn exchange<T: serde::de::DeserializeOwned>(
    stream: &mut TcpStream,
    frame: &[u8],
) -> Result<T, WireError> {
    write_frame(stream, frame).map_err(io_error)?;
    let reply = read_frame(stream)
        .map_err(io_error)?
        .ok_or_else(|| io_error(std::io::ErrorKind::UnexpectedEof.into()))?;
    Response::from_bytes(&reply)?.into_result()
}
