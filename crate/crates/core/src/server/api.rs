use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};

use super::{ServerError, ServerState};
use crate::attestation::RegistrationEntry;
use crate::clock::Clock;
use crate::crypto::{IssuedCert, JwtSvid, TrustBundle};
use crate::tls::{dynamic_server_config, serve_tls, HandshakeError, TrustSnapshot};
use crate::wire::{decode_request, read_frame, write_frame, Response, WireError};

/// Requests accepted by the server. Admin operations (`register_entry`,
/// `list_entries`) are only honoured on the local admin endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ServerRequest {
    /// `public_key` is a base64 DER SubjectPublicKeyInfo held by the agent.
    NodeAttest {
        join_token: String,
        public_key: String,
    },
    Sign {
        requests: Vec<SignRequest>,
    },
    Bundle,
    /// Workload entries parented to the calling agent, with current bundles.
    Entries,
    RenewAgent {
        public_key: String,
    },
    RegisterEntry {
        entry: RegistrationEntry,
    },
    ListEntries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SvidKind {
    #[serde(rename = "X509")]
    X509,
    #[serde(rename = "JWT")]
    Jwt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignRequest {
    pub spiffe_id: String,
    pub kind: SvidKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub audiences: Vec<String>,
    /// Base64 SubjectPublicKeyInfo; required for X509.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_key: Option<String>,
}

impl SignRequest {
    pub fn public_key(&self) -> Option<Vec<u8>> {
        self.public_key
            .as_deref()
            .and_then(crate::crypto::b64::decode)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SignedSvid {
    #[serde(rename = "X509")]
    X509 { cert: IssuedCert },
    #[serde(rename = "JWT")]
    Jwt { token: JwtSvid },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignItem {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svid: Option<SignedSvid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl From<Result<SignedSvid, ServerError>> for SignItem {
    fn from(r: Result<SignedSvid, ServerError>) -> Self {
        match r {
            Ok(svid) => SignItem {
                ok: true,
                svid: Some(svid),
                error: None,
            },
            Err(e) => SignItem {
                ok: false,
                svid: None,
                error: Some(wire_error(&e)),
            },
        }
    }
}

impl SignItem {
    pub fn into_result(self) -> Result<SignedSvid, WireError> {
        match (self.svid, self.error) {
            (Some(svid), None) if self.ok => Ok(svid),
            (_, Some(err)) => Err(err),
            _ => Err(WireError {
                code: "BadResponse".to_owned(),
                message: "sign item without svid".to_owned(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignResponse {
    pub results: Vec<SignItem>,
    pub bundle: TrustBundle,
    pub federated_bundles: Vec<TrustBundle>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncResponse {
    pub entries: Vec<RegistrationEntry>,
    pub bundle: TrustBundle,
    pub federated_bundles: Vec<TrustBundle>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeAttestResponse {
    pub svid: IssuedCert,
    pub bundle: TrustBundle,
}

fn wire_error(e: &ServerError) -> WireError {
    WireError {
        code: e.code().to_owned(),
        message: e.to_string(),
    }
}

fn respond<T: Serialize>(r: Result<T, ServerError>) -> Response {
    match r {
        Ok(v) => Response::success(&v),
        Err(e) => Response::failure(e.code(), e.to_string()),
    }
}

fn decode_key(b64: &str) -> Result<Vec<u8>, ServerError> {
    crate::crypto::b64::decode(b64)
        .ok_or_else(|| ServerError::BadRequest("public_key is not base64".to_owned()))
}

impl ServerState {
    /// Serves one request frame from the agent-facing endpoint. `peer_chain`
    /// is the client certificate chain presented on the connection, if any.
    pub fn handle_frame(&self, frame: &[u8], peer_chain: Option<&[Vec<u8>]>, now: i64) -> Vec<u8> {
        let req = match decode_request::<ServerRequest>(frame) {
            Ok(r) => r,
            Err(resp) => return resp.to_bytes(),
        };
        let resp = match req {
            ServerRequest::NodeAttest {
                join_token,
                public_key,
            } => respond(
                decode_key(&public_key)
                    .and_then(|k| self.node_attest_with_token(&join_token, &k, now)),
            ),
            ServerRequest::Sign { requests } => respond(
                self.authenticate_agent(peer_chain, now)
                    .map(|agent| self.handle_sign_request(&agent, &requests, now)),
            ),
            ServerRequest::Bundle => Response::success(&self.bundle()),
            ServerRequest::Entries => respond(
                self.authenticate_agent(peer_chain, now)
                    .map(|agent| self.sync_agent(&agent)),
            ),
            ServerRequest::RenewAgent { public_key } => respond(
                self.authenticate_agent(peer_chain, now)
                    .and_then(|agent| self.renew_agent(&agent, &decode_key(&public_key)?, now)),
            ),
            ServerRequest::RegisterEntry { .. } | ServerRequest::ListEntries => {
                respond::<()>(Err(ServerError::Forbidden))
            }
        };
        resp.to_bytes()
    }

    /// Serves one request frame from the local admin endpoint.
    pub fn handle_admin_frame(&self, frame: &[u8]) -> Vec<u8> {
        let resp = match decode_request::<ServerRequest>(frame) {
            Err(resp) => resp,
            Ok(ServerRequest::RegisterEntry { entry }) => respond(
                self.register_entry(entry)
                    .map(|id| serde_json::json!({ "entry_id": id })),
            ),
            Ok(ServerRequest::ListEntries) => Response::success(&self.entries()),
            Ok(ServerRequest::Bundle) => Response::success(&self.bundle()),
            Ok(_) => respond::<()>(Err(ServerError::Forbidden)),
        };
        resp.to_bytes()
    }
}

/// Agent-facing TLS endpoint. Client certificates are optional at the TLS
/// layer so unattested agents can reach `node_attest` and `bundle`.
pub fn serve_api(
    state: Arc<ServerState>,
    listener: TcpListener,
    clock: Arc<dyn Clock>,
) -> Result<(), HandshakeError> {
    let (s1, s2, c1) = (state.clone(), state.clone(), clock.clone());
    let config = dynamic_server_config(
        Arc::new(move || s1.svid()),
        Arc::new(move || TrustSnapshot {
            bundles: vec![s2.bundle()],
            now: c1.now(),
        }),
        false,
    )?;
    serve_tls(
        listener,
        config,
        Arc::new(move |frame, chain| state.handle_frame(frame, chain.as_deref(), clock.now())),
    );
    Ok(())
}

/// Federation bundle endpoint. Clients must present an SVID from a
/// configured peer domain.
pub fn serve_federation(
    state: Arc<ServerState>,
    listener: TcpListener,
    clock: Arc<dyn Clock>,
) -> Result<(), HandshakeError> {
    let (s1, s2, c1) = (state.clone(), state.clone(), clock.clone());
    let config = dynamic_server_config(
        Arc::new(move || s1.svid()),
        Arc::new(move || TrustSnapshot {
            bundles: s2.federation_trust(),
            now: c1.now(),
        }),
        true,
    )?;
    serve_tls(
        listener,
        config,
        Arc::new(move |frame, chain| {
            state.handle_federation_frame(frame, chain.as_deref(), clock.now())
        }),
    );
    Ok(())
}

/// Plain-TCP admin endpoint. Connections from non-loopback peers are dropped.
pub fn serve_admin(state: Arc<ServerState>, listener: TcpListener) {
    for stream in listener.incoming() {
        let Ok(mut stream) = stream else { continue };
        if !stream.peer_addr().is_ok_and(|a| a.ip().is_loopback()) {
            continue;
        }
        let state = state.clone();
        thread::spawn(move || {
            while let Ok(Some(frame)) = read_frame(&mut stream) {
                if write_frame(&mut stream, &state.handle_admin_frame(&frame)).is_err() {
                    break;
                }
            }
        });
    }
}

/// Client for the local admin endpoint.
pub fn admin_request<T: for<'de> Deserialize<'de>>(
    addr: impl ToSocketAddrs,
    request: &ServerRequest,
) -> Result<T, WireError> {
    let io = |e: std::io::Error| WireError {
        code: "Unreachable".into(),
        message: e.to_string(),
    };
    let mut stream = TcpStream::connect(addr).map_err(io)?;
    write_frame(
        &mut stream,
        &serde_json::to_vec(request).expect("request serializes"),
    )
    .map_err(io)?;
    let reply = read_frame(&mut stream)
        .map_err(io)?
        .ok_or_else(|| WireError {
            code: "Unreachable".into(),
            message: "connection closed".into(),
        })?;
    Response::from_bytes(&reply)?.into_result()
}
