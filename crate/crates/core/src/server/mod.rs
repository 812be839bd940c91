//! Trust-domain server: authority, registration entries, node attestation,
//! SVID signing for authenticated agents, bundle publication and federation.

mod api;
mod federation;
mod store;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::{attest_node, AttestError, RegistrationEntry, SelectorSet};
use crate::crypto::{
    serialize_bundle, verify_x509_svid, Authority, AuthorityConfig, IssueError, IssuedCert,
    TrustBundle, X509Svid,
};
use crate::id::{SpiffeId, TrustDomain};

pub use api::{
    admin_request, serve_admin, serve_api, serve_federation, NodeAttestResponse, ServerRequest,
    SignItem, SignRequest, SignResponse, SignedSvid, SvidKind, SyncResponse,
};
pub use federation::{
    FederatedBundle, FederationError, FederationPeer, FederationTransport, FetchError,
    LocalTransport, TcpTransport,
};
pub use store::{derive_entry_id, EntryStore};

/// Path of the server's own identity within its trust domain.
pub const SERVER_PATH: [&str; 2] = ["spire", "server"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSettings {
    pub authority: AuthorityConfig,
    /// Lifetime of the server's own SVID, re-minted at half-life.
    pub server_svid_ttl: i64,
}

impl Default for ServerSettings {
    fn default() -> Self {
        ServerSettings {
            authority: AuthorityConfig::default(),
            server_svid_ttl: 3600,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServerError {
    #[error("no node entry matches")]
    NoMatch,
    #[error("more than one node entry matches: {0:?}")]
    AmbiguousMatch(Vec<String>),
    #[error("caller is not an attested agent of this domain")]
    UnknownAgent,
    #[error("agent is not the parent of {0}")]
    NotAuthorizedForId(String),
    #[error("entry names a foreign trust domain")]
    ForeignDomain,
    #[error("entry already registered")]
    DuplicateEntry,
    #[error("invalid entry: {0}")]
    InvalidEntry(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("operation not permitted on this endpoint")]
    Forbidden,
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServerError {
    pub fn code(&self) -> &'static str {
        match self {
            ServerError::NoMatch => "NoMatch",
            ServerError::AmbiguousMatch(_) => "AmbiguousMatch",
            ServerError::UnknownAgent => "UnknownAgent",
            ServerError::NotAuthorizedForId(_) => "NotAuthorizedForId",
            ServerError::ForeignDomain => "ForeignDomain",
            ServerError::DuplicateEntry => "DuplicateEntry",
            ServerError::InvalidEntry(_) => "InvalidEntry",
            ServerError::BadRequest(_) => "BadRequest",
            ServerError::Forbidden => "Forbidden",
            ServerError::Internal(_) => "Internal",
        }
    }
}

impl From<IssueError> for ServerError {
    fn from(e: IssueError) -> Self {
        match e {
            IssueError::BadKey => ServerError::BadRequest("public key rejected".to_owned()),
            IssueError::EmptyAudience => ServerError::BadRequest("empty audience".to_owned()),
            other => ServerError::Internal(other.to_string()),
        }
    }
}

/// What periodic maintenance changed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Maintenance {
    pub jwt_keys_pruned: bool,
    pub server_svid_renewed: bool,
}

/// Server state. Reads take snapshots; mutations hold an exclusive lock
/// only for the swap. `federated` never holds the server's own domain.
pub struct ServerState {
    trust_domain: TrustDomain,
    server_id: SpiffeId,
    settings: ServerSettings,
    authority: RwLock<Arc<Authority>>,
    entries: RwLock<EntryStore>,
    federated: RwLock<BTreeMap<TrustDomain, FederatedBundle>>,
    peers: RwLock<BTreeMap<TrustDomain, FederationPeer>>,
    join_tokens: Mutex<BTreeMap<String, SelectorSet>>,
    svid: RwLock<Arc<X509Svid>>,
}

impl std::fmt::Debug for ServerState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerState")
            .field("trust_domain", &self.trust_domain)
            .finish_non_exhaustive()
    }
}

fn read<T>(lock: &RwLock<T>) -> std::sync::RwLockReadGuard<'_, T> {
    lock.read().unwrap_or_else(|p| p.into_inner())
}

fn write<T>(lock: &RwLock<T>) -> std::sync::RwLockWriteGuard<'_, T> {
    lock.write().unwrap_or_else(|p| p.into_inner())
}

impl ServerState {
    pub fn new(
        trust_domain: TrustDomain,
        settings: ServerSettings,
        now: i64,
    ) -> Result<Self, IssueError> {
        Self::with_store(trust_domain, settings, EntryStore::in_memory(), now)
    }

    pub fn with_store(
        trust_domain: TrustDomain,
        settings: ServerSettings,
        store: EntryStore,
        now: i64,
    ) -> Result<Self, IssueError> {
        let authority = Authority::create(trust_domain.clone(), settings.authority.clone(), now)?;
        let server_id = SpiffeId::from_segments(trust_domain.clone(), &SERVER_PATH)
            .expect("server path is valid");
        let ttl = settings
            .server_svid_ttl
            .min(authority.config().x509_max_ttl);
        let svid = authority.mint_x509_svid(&server_id, ttl, now)?;
        Ok(ServerState {
            trust_domain,
            server_id,
            settings,
            authority: RwLock::new(Arc::new(authority)),
            entries: RwLock::new(store),
            federated: RwLock::new(BTreeMap::new()),
            peers: RwLock::new(BTreeMap::new()),
            join_tokens: Mutex::new(BTreeMap::new()),
            svid: RwLock::new(Arc::new(svid)),
        })
    }

    pub fn trust_domain(&self) -> &TrustDomain {
        &self.trust_domain
    }

    pub fn server_id(&self) -> &SpiffeId {
        &self.server_id
    }

    pub fn authority(&self) -> Arc<Authority> {
        read(&self.authority).clone()
    }

    pub fn bundle(&self) -> TrustBundle {
        self.authority().bundle()
    }

    pub fn serve_bundle(&self) -> Vec<u8> {
        serialize_bundle(&self.bundle())
    }

    /// The server's current X.509-SVID.
    pub fn svid(&self) -> Arc<X509Svid> {
        read(&self.svid).clone()
    }

    /// Own bundle followed by federated bundles in domain order.
    pub fn trust_set(&self) -> Vec<TrustBundle> {
        std::iter::once(self.bundle())
            .chain(read(&self.federated).values().map(|f| f.bundle.clone()))
            .collect()
    }

    pub fn federated_bundles(&self) -> BTreeMap<TrustDomain, FederatedBundle> {
        read(&self.federated).clone()
    }

    pub fn register_entry(&self, mut entry: RegistrationEntry) -> Result<String, ServerError> {
        if !entry.spiffe_id.member_of(&self.trust_domain)
            || !entry.parent_id.member_of(&self.trust_domain)
        {
            return Err(ServerError::ForeignDomain);
        }
        if entry.entry_id.is_empty() {
            entry.entry_id = derive_entry_id(&entry);
        }
        entry
            .validate()
            .map_err(|e| ServerError::InvalidEntry(e.to_string()))?;
        if entry.is_node_entry != (entry.parent_id == self.server_id) {
            return Err(ServerError::InvalidEntry(
                "node entries, and only node entries, are parented to the server".to_owned(),
            ));
        }
        let mut store = write(&self.entries);
        if store.conflicts(&entry) {
            return Err(ServerError::DuplicateEntry);
        }
        let id = entry.entry_id.clone();
        store
            .insert(entry)
            .map_err(|e| ServerError::Internal(e.to_string()))?;
        Ok(id)
    }

    pub fn entries(&self) -> Vec<RegistrationEntry> {
        read(&self.entries).all()
    }

    /// Workload entries an agent may mint for.
    pub fn authorized_entries(&self, agent_id: &SpiffeId) -> Vec<RegistrationEntry> {
        read(&self.entries)
            .children_of(agent_id)
            .into_iter()
            .filter(|e| !e.is_node_entry)
            .collect()
    }

    /// Everything an agent needs to attest workloads locally.
    pub fn sync_agent(&self, agent_id: &SpiffeId) -> SyncResponse {
        SyncResponse {
            entries: self.authorized_entries(agent_id),
            bundle: self.bundle(),
            federated_bundles: self.federated_bundle_list(),
        }
    }

    fn federated_bundle_list(&self) -> Vec<TrustBundle> {
        read(&self.federated)
            .values()
            .map(|f| f.bundle.clone())
            .collect()
    }

    /// Registers a one-time join credential standing for `selectors`.
    pub fn add_join_token(&self, token: &str, selectors: SelectorSet) {
        self.join_tokens
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(token.to_owned(), selectors);
    }

    /// Consumes a join token. Unknown or spent tokens yield `NoMatch`.
    pub fn node_attest_with_token(
        &self,
        token: &str,
        agent_spki: &[u8],
        now: i64,
    ) -> Result<NodeAttestResponse, ServerError> {
        let selectors = self
            .join_tokens
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .remove(token)
            .ok_or(ServerError::NoMatch)?;
        self.handle_node_attest(&selectors, agent_spki, now)
    }

    /// Mints an agent SVID for the unique node entry matching `node_selectors`.
    pub fn handle_node_attest(
        &self,
        node_selectors: &SelectorSet,
        agent_spki: &[u8],
        now: i64,
    ) -> Result<NodeAttestResponse, ServerError> {
        let entries = self.entries();
        let attested =
            attest_node(&entries, &self.server_id, node_selectors, now).map_err(|e| match e {
                AttestError::NoMatch => ServerError::NoMatch,
                AttestError::AmbiguousMatch(ids) => ServerError::AmbiguousMatch(ids),
            })?;
        let entry = entries
            .iter()
            .find(|e| e.entry_id == attested.matched_entry_id)
            .expect("matched entry is present");
        let authority = self.authority();
        let ttl = entry.ttl_seconds.min(authority.config().x509_max_ttl);
        let svid = authority.sign_x509_leaf(&attested.spiffe_id, agent_spki, ttl, now)?;
        Ok(NodeAttestResponse {
            svid,
            bundle: authority.bundle(),
        })
    }

    /// Resolves a verified peer chain to an attested agent identity.
    pub fn authenticate_agent(
        &self,
        peer_chain: Option<&[Vec<u8>]>,
        now: i64,
    ) -> Result<SpiffeId, ServerError> {
        let chain = peer_chain.ok_or(ServerError::UnknownAgent)?;
        let (leaf, inters) = chain.split_first().ok_or(ServerError::UnknownAgent)?;
        let id = verify_x509_svid(leaf, inters, &self.bundle(), now)
            .map_err(|_| ServerError::UnknownAgent)?;
        let known = read(&self.entries)
            .children_of(&self.server_id)
            .iter()
            .any(|e| e.is_node_entry && e.spiffe_id == id);
        if known {
            Ok(id)
        } else {
            Err(ServerError::UnknownAgent)
        }
    }

    /// Re-certifies an authenticated agent under its node entry.
    pub fn renew_agent(
        &self,
        agent_id: &SpiffeId,
        agent_spki: &[u8],
        now: i64,
    ) -> Result<IssuedCert, ServerError> {
        let ttl = read(&self.entries)
            .children_of(&self.server_id)
            .iter()
            .filter(|e| e.is_node_entry && &e.spiffe_id == agent_id)
            .map(|e| e.ttl_seconds)
            .min()
            .ok_or(ServerError::UnknownAgent)?;
        let authority = self.authority();
        let ttl = ttl.min(authority.config().x509_max_ttl);
        Ok(authority.sign_x509_leaf(agent_id, agent_spki, ttl, now)?)
    }

    /// Mints one SVID per authorized request. Each request fails on its own.
    pub fn handle_sign_request(
        &self,
        agent_id: &SpiffeId,
        requests: &[SignRequest],
        now: i64,
    ) -> SignResponse {
        let authorized = self.authorized_entries(agent_id);
        let authority = self.authority();
        let results = requests
            .iter()
            .map(|req| SignItem::from(self.sign_one(&authority, &authorized, req, now)))
            .collect();
        SignResponse {
            results,
            bundle: authority.bundle(),
            federated_bundles: self.federated_bundle_list(),
        }
    }

    fn sign_one(
        &self,
        authority: &Authority,
        authorized: &[RegistrationEntry],
        req: &SignRequest,
        now: i64,
    ) -> Result<SignedSvid, ServerError> {
        let id = SpiffeId::parse(&req.spiffe_id)
            .map_err(|e| ServerError::BadRequest(format!("spiffe_id: {e}")))?;
        let ttl = authorized
            .iter()
            .filter(|e| e.spiffe_id == id)
            .map(|e| e.ttl_seconds)
            .min()
            .ok_or_else(|| ServerError::NotAuthorizedForId(id.to_string()))?;
        match req.kind {
            SvidKind::X509 => {
                let spki = req
                    .public_key()
                    .ok_or_else(|| ServerError::BadRequest("x509 requires public_key".into()))?;
                let ttl = ttl.min(authority.config().x509_max_ttl);
                Ok(SignedSvid::X509 {
                    cert: authority.sign_x509_leaf(&id, &spki, ttl, now)?,
                })
            }
            SvidKind::Jwt => {
                let ttl = ttl.min(authority.config().jwt_default_ttl);
                Ok(SignedSvid::Jwt {
                    token: authority.mint_jwt_svid(&id, &req.audiences, ttl, now)?,
                })
            }
        }
    }

    /// Adds a JWT signing key; the previous key stays published for the overlap window.
    pub fn rotate_authority_jwt_key(&self, now: i64) -> Result<TrustBundle, IssueError> {
        let mut guard = write(&self.authority);
        let next = guard.rotate_jwt_key(now)?;
        let bundle = next.bundle();
        *guard = Arc::new(next);
        Ok(bundle)
    }

    /// Drops expired JWT keys and renews the server SVID past half-life.
    pub fn maintain(&self, now: i64) -> Result<Maintenance, IssueError> {
        let mut report = Maintenance::default();
        {
            let mut guard = write(&self.authority);
            if let Some(next) = guard.prune(now) {
                *guard = Arc::new(next);
                report.jwt_keys_pruned = true;
            }
        }
        let current = self.svid();
        if 2 * (now - current.issued_at) >= current.lifetime() {
            let authority = self.authority();
            let ttl = self
                .settings
                .server_svid_ttl
                .min(authority.config().x509_max_ttl);
            let fresh = authority.mint_x509_svid(&self.server_id, ttl, now)?;
            *write(&self.svid) = Arc::new(fresh);
            report.server_svid_renewed = true;
        }
        Ok(report)
    }
}
