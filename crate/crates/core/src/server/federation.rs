use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{read, write, ServerError, ServerState};
use crate::crypto::{verify_x509_svid_in, TrustBundle};
use crate::id::TrustDomain;
use crate::tls::{
    client_config, fixed_trust, server_config, HandshakeError, MemoryPair, TlsClient,
};
use crate::wire::{decode_request, Response};

use super::api::ServerRequest;

/// A peer trust domain. The bootstrap bundle is configured out of band and
/// authenticates the first fetch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationPeer {
    pub trust_domain: TrustDomain,
    pub endpoint: String,
    pub bootstrap: TrustBundle,
    pub refresh_interval_seconds: u64,
}

impl FederationPeer {
    pub fn new(
        trust_domain: TrustDomain,
        endpoint: &str,
        bootstrap: TrustBundle,
        refresh_interval_seconds: u64,
    ) -> Result<Self, FederationError> {
        if bootstrap.trust_domain != trust_domain {
            return Err(FederationError::DomainMismatch);
        }
        Ok(FederationPeer {
            trust_domain,
            endpoint: endpoint.to_owned(),
            bootstrap,
            refresh_interval_seconds,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FederatedBundle {
    pub bundle: TrustBundle,
    pub fetched_at: i64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FederationError {
    #[error("peer unreachable: {0}")]
    PeerUnreachable(String),
    #[error("peer offered sequence {offered} but {held} is held")]
    SequenceRegression { held: u64, offered: u64 },
    #[error("bundle names a different trust domain")]
    DomainMismatch,
    #[error("TLS authentication failed: {0}")]
    TlsAuthFailure(HandshakeError),
    #[error("peer served a malformed bundle")]
    MalformedBundle,
    #[error("no such federation peer")]
    UnknownPeer,
    #[error("a server cannot federate with its own domain")]
    OwnDomain,
}

impl FederationError {
    pub fn code(&self) -> &'static str {
        match self {
            FederationError::PeerUnreachable(_) => "PeerUnreachable",
            FederationError::SequenceRegression { .. } => "SequenceRegression",
            FederationError::DomainMismatch => "DomainMismatch",
            FederationError::TlsAuthFailure(_) => "TlsAuthFailure",
            FederationError::MalformedBundle => "MalformedBundle",
            FederationError::UnknownPeer => "UnknownPeer",
            FederationError::OwnDomain => "OwnDomain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FetchError {
    Unreachable(String),
    Handshake(HandshakeError),
}

/// Carries one bundle request to a peer's federation endpoint over TLS
/// configured by `client`.
pub trait FederationTransport {
    fn fetch_bundle(
        &self,
        endpoint: &str,
        client: Arc<rustls::ClientConfig>,
        now: i64,
    ) -> Result<Vec<u8>, FetchError>;
}

/// Real TCP connections; `endpoint` is a socket address.
#[derive(Debug, Clone, Copy, Default)]
pub struct TcpTransport;

impl FederationTransport for TcpTransport {
    fn fetch_bundle(
        &self,
        endpoint: &str,
        client: Arc<rustls::ClientConfig>,
        _now: i64,
    ) -> Result<Vec<u8>, FetchError> {
        let mut conn = TlsClient::connect(endpoint, client).map_err(|e| match e {
            HandshakeError::Io(m) => FetchError::Unreachable(m),
            other => FetchError::Handshake(other),
        })?;
        let req = serde_json::to_vec(&ServerRequest::Bundle).expect("request serializes");
        conn.request(&req)
            .map_err(|e| FetchError::Unreachable(e.to_string()))
    }
}

/// In-process servers addressed by name, reached through an in-memory TLS
/// handshake. Endpoints can be marked down.
#[derive(Default)]
pub struct LocalTransport {
    servers: RwLock<BTreeMap<String, Arc<ServerState>>>,
    down: RwLock<BTreeSet<String>>,
}

impl LocalTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, endpoint: &str, server: Arc<ServerState>) {
        write(&self.servers).insert(endpoint.to_owned(), server);
    }

    pub fn set_reachable(&self, endpoint: &str, reachable: bool) {
        let mut down = write(&self.down);
        if reachable {
            down.remove(endpoint);
        } else {
            down.insert(endpoint.to_owned());
        }
    }
}

impl FederationTransport for LocalTransport {
    fn fetch_bundle(
        &self,
        endpoint: &str,
        client: Arc<rustls::ClientConfig>,
        now: i64,
    ) -> Result<Vec<u8>, FetchError> {
        if read(&self.down).contains(endpoint) {
            return Err(FetchError::Unreachable(format!("{endpoint} is down")));
        }
        let server = read(&self.servers)
            .get(endpoint)
            .cloned()
            .ok_or_else(|| FetchError::Unreachable(format!("no server at {endpoint}")))?;
        let cfg = server
            .federation_server_config(now)
            .map_err(FetchError::Handshake)?;
        let mut pair = MemoryPair::connect(client, cfg).map_err(FetchError::Handshake)?;
        let req = serde_json::to_vec(&ServerRequest::Bundle).expect("request serializes");
        pair.round_trip(&req, |frame, chain| {
            server.handle_federation_frame(frame, chain.as_deref(), now)
        })
        .map_err(FetchError::Handshake)
    }
}

impl ServerState {
    pub fn add_federation_peer(&self, peer: FederationPeer) -> Result<(), FederationError> {
        if peer.trust_domain == self.trust_domain {
            return Err(FederationError::OwnDomain);
        }
        if peer.bootstrap.trust_domain != peer.trust_domain {
            return Err(FederationError::DomainMismatch);
        }
        write(&self.peers).insert(peer.trust_domain.clone(), peer);
        Ok(())
    }

    pub fn federation_peers(&self) -> Vec<FederationPeer> {
        read(&self.peers).values().cloned().collect()
    }

    /// Bundles that authenticate peer servers: the stored bundle where one
    /// has been fetched, the bootstrap bundle otherwise.
    pub fn federation_trust(&self) -> Vec<TrustBundle> {
        let stored = read(&self.federated);
        read(&self.peers)
            .values()
            .map(|p| {
                stored
                    .get(&p.trust_domain)
                    .map(|f| f.bundle.clone())
                    .unwrap_or_else(|| p.bootstrap.clone())
            })
            .collect()
    }

    /// TLS config for the federation endpoint at a fixed time.
    pub fn federation_server_config(
        &self,
        now: i64,
    ) -> Result<Arc<rustls::ServerConfig>, HandshakeError> {
        server_config(
            &self.svid(),
            fixed_trust(self.federation_trust(), now),
            true,
        )
    }

    /// Serves one federation-endpoint frame. Only `bundle` is accepted, and
    /// only from a peer server whose chain verifies against `federation_trust`.
    pub fn handle_federation_frame(
        &self,
        frame: &[u8],
        peer_chain: Option<&[Vec<u8>]>,
        now: i64,
    ) -> Vec<u8> {
        let authed = peer_chain
            .and_then(|c| c.split_first())
            .is_some_and(|(leaf, inters)| {
                verify_x509_svid_in(leaf, inters, &self.federation_trust(), now).is_ok()
            });
        let resp = if !authed {
            Response::failure(ServerError::Forbidden.code(), "peer certificate required")
        } else {
            match decode_request::<ServerRequest>(frame) {
                Err(resp) => resp,
                Ok(ServerRequest::Bundle) => Response::success(&self.bundle()),
                Ok(_) => Response::failure(ServerError::Forbidden.code(), "bundle only"),
            }
        };
        resp.to_bytes()
    }

    /// Fetches a peer's bundle over TLS authenticated by the bundle held for
    /// that peer, storing it unless its sequence would regress.
    pub fn refresh_federated_bundle(
        &self,
        peer_domain: &TrustDomain,
        transport: &dyn FederationTransport,
        now: i64,
    ) -> Result<TrustBundle, FederationError> {
        let peer = read(&self.peers)
            .get(peer_domain)
            .cloned()
            .ok_or(FederationError::UnknownPeer)?;
        let held = read(&self.federated).get(peer_domain).cloned();
        let anchor = held
            .as_ref()
            .map(|f| f.bundle.clone())
            .unwrap_or_else(|| peer.bootstrap.clone());
        let client = client_config(Some(&self.svid()), fixed_trust(vec![anchor], now))
            .map_err(FederationError::TlsAuthFailure)?;
        let bytes = transport
            .fetch_bundle(&peer.endpoint, client, now)
            .map_err(|e| match e {
                FetchError::Unreachable(m) => FederationError::PeerUnreachable(m),
                FetchError::Handshake(h) => FederationError::TlsAuthFailure(h),
            })?;
        let bundle = Response::from_bytes(&bytes)
            .map_err(|_| FederationError::MalformedBundle)?
            .into_result::<TrustBundle>()
            .map_err(|e| match e.code.as_str() {
                "Forbidden" => FederationError::TlsAuthFailure(HandshakeError::Tls(e.message)),
                _ => FederationError::MalformedBundle,
            })?;
        if bundle.trust_domain != peer.trust_domain {
            return Err(FederationError::DomainMismatch);
        }
        self.store_federated_bundle(bundle.clone(), now)?;
        Ok(bundle)
    }

    /// Peers never fetched, or whose refresh interval has elapsed.
    pub fn due_federation_refreshes(&self, now: i64) -> Vec<TrustDomain> {
        let stored = read(&self.federated);
        read(&self.peers)
            .values()
            .filter(|p| {
                stored
                    .get(&p.trust_domain)
                    .is_none_or(|f| now - f.fetched_at >= p.refresh_interval_seconds as i64)
            })
            .map(|p| p.trust_domain.clone())
            .collect()
    }

    /// Installs a bundle directly, subject to the same checks as a fetch.
    pub fn store_federated_bundle(
        &self,
        bundle: TrustBundle,
        now: i64,
    ) -> Result<(), FederationError> {
        if bundle.trust_domain == self.trust_domain {
            return Err(FederationError::OwnDomain);
        }
        let mut stored = write(&self.federated);
        if let Some(current) = stored.get(&bundle.trust_domain) {
            if bundle.sequence < current.bundle.sequence {
                return Err(FederationError::SequenceRegression {
                    held: current.bundle.sequence,
                    offered: bundle.sequence,
                });
            }
        }
        stored.insert(
            bundle.trust_domain.clone(),
            FederatedBundle {
                bundle,
                fetched_at: now,
            },
        );
        Ok(())
    }
}
