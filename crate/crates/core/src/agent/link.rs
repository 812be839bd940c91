use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::crypto::{TrustBundle, X509Svid};
use crate::server::ServerState;
use crate::tls::{client_config, fixed_trust, HandshakeError, TlsClient};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unreachable(pub String);

/// A request channel from agent to server. `identity` is presented as the
/// client certificate; `trust` authenticates the server.
pub trait ServerLink: Send + Sync {
    fn call(
        &self,
        frame: &[u8],
        identity: Option<&X509Svid>,
        trust: &TrustBundle,
        now: i64,
    ) -> Result<Vec<u8>, Unreachable>;
}

/// An in-process server. Frames are still encoded and decoded; the client
/// chain is handed over as the TLS layer would.
pub struct LocalLink {
    server: Arc<ServerState>,
    reachable: AtomicBool,
}

impl LocalLink {
    pub fn new(server: Arc<ServerState>) -> Self {
        LocalLink {
            server,
            reachable: AtomicBool::new(true),
        }
    }

    pub fn set_reachable(&self, reachable: bool) {
        self.reachable.store(reachable, Ordering::SeqCst);
    }

    pub fn server(&self) -> &Arc<ServerState> {
        &self.server
    }
}

impl ServerLink for LocalLink {
    fn call(
        &self,
        frame: &[u8],
        identity: Option<&X509Svid>,
        _trust: &TrustBundle,
        now: i64,
    ) -> Result<Vec<u8>, Unreachable> {
        if !self.reachable.load(Ordering::SeqCst) {
            return Err(Unreachable("server marked unreachable".to_owned()));
        }
        let chain = identity.map(X509Svid::cert_chain);
        Ok(self.server.handle_frame(frame, chain.as_deref(), now))
    }
}

/// A server API endpoint over TCP and mutual TLS, one connection per call.
#[derive(Debug, Clone)]
pub struct TlsLink {
    addr: SocketAddr,
}

impl TlsLink {
    pub fn new(addr: SocketAddr) -> Self {
        TlsLink { addr }
    }
}

impl ServerLink for TlsLink {
    fn call(
        &self,
        frame: &[u8],
        identity: Option<&X509Svid>,
        trust: &TrustBundle,
        now: i64,
    ) -> Result<Vec<u8>, Unreachable> {
        let fail = |e: HandshakeError| Unreachable(e.to_string());
        let cfg = client_config(identity, fixed_trust(vec![trust.clone()], now)).map_err(fail)?;
        let mut conn = TlsClient::connect(self.addr, cfg).map_err(fail)?;
        conn.request(frame).map_err(|e| Unreachable(e.to_string()))
    }
}
