//! Node agent: node attestation, local workload attestation, an SVID cache
//! and rotation.
//!
//! Workloads are known to the agent only by a handle bound before they call.
//! Selectors come from plugins reading the metadata bound to that handle, so
//! nothing a workload says about itself affects what it receives.

mod link;
mod plugins;
mod workload_api;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::{attest_workload, RegistrationEntry, SelectorSet};
use crate::crypto::{b64, IssuedCert, JwtSvid, KeyAlgorithm, KeyPair, TrustBundle, X509Svid};
use crate::id::SpiffeId;
use crate::server::{
    NodeAttestResponse, ServerRequest, SignRequest, SignResponse, SignedSvid, SvidKind,
    SyncResponse,
};
use crate::wire::{Response, WireError};

pub use link::{LocalLink, ServerLink, TlsLink, Unreachable};
pub use plugins::{
    plugin_by_name, resolve_selectors, DockerLabelPlugin, EnvPlugin, K8sPlugin, SelectorPlugin,
    SimPlugin, UnixPathPlugin, WorkloadInfo, PLUGIN_NAMES,
};
pub use workload_api::{serve_workload_api, WorkloadClient, WorkloadRequest, AGENT_ADDR_ENV};

/// Cached SVIDs are withheld this many seconds before expiry.
pub const EXPIRY_MARGIN_SECONDS: i64 = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSettings {
    /// Fraction of an SVID's lifetime after which it is re-minted.
    pub rotation_threshold: f64,
    pub key_algorithm: KeyAlgorithm,
    pub plugins: Vec<String>,
}

impl Default for AgentSettings {
    fn default() -> Self {
        AgentSettings {
            rotation_threshold: 0.5,
            key_algorithm: KeyAlgorithm::Ed25519,
            plugins: PLUGIN_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AgentError {
    #[error("node attestation failed: {0}")]
    NodeAttestFailed(String),
    #[error("server unreachable: {0}")]
    ServerUnreachable(String),
    #[error("agent has not completed node attestation")]
    AgentNotBootstrapped,
    #[error("no registration entry matches the workload")]
    NoIdentity,
    #[error("at least one non-empty audience is required")]
    EmptyAudience,
    #[error("server refused the agent: {0}")]
    ServerRejected(String),
    #[error("invalid agent settings: {0}")]
    BadSettings(String),
}

impl AgentError {
    pub fn code(&self) -> &'static str {
        match self {
            AgentError::NodeAttestFailed(_) => "NodeAttestFailed",
            AgentError::ServerUnreachable(_) => "ServerUnreachable",
            AgentError::AgentNotBootstrapped => "AgentNotBootstrapped",
            AgentError::NoIdentity => "NoIdentity",
            AgentError::EmptyAudience => "EmptyAudience",
            AgentError::ServerRejected(_) => "ServerRejected",
            AgentError::BadSettings(_) => "BadSettings",
        }
    }
}

/// Result of a Workload API X.509 fetch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct X509Response {
    /// Ordered by SPIFFE ID.
    pub svids: Vec<X509Svid>,
    pub bundle: TrustBundle,
    pub federated_bundles: Vec<TrustBundle>,
}

impl X509Response {
    /// Own bundle followed by federated bundles.
    pub fn trust_set(&self) -> Vec<TrustBundle> {
        std::iter::once(self.bundle.clone())
            .chain(self.federated_bundles.iter().cloned())
            .collect()
    }
}

/// One SVID replaced by `rotation_tick`. `handle` is `None` for the agent's own SVID.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rotation {
    pub handle: Option<String>,
    pub spiffe_id: SpiffeId,
    pub issued_at: i64,
    pub not_after: i64,
}

/// Instant at which `svid` is due for re-minting.
pub fn rotate_at(svid: &X509Svid, threshold: f64) -> i64 {
    svid.issued_at + (threshold * svid.lifetime() as f64).ceil() as i64
}

/// Whether a cached SVID may still be handed out.
pub fn servable(svid: &X509Svid, now: i64) -> bool {
    now < svid.not_after - EXPIRY_MARGIN_SECONDS
}

struct NodeState {
    svid: Arc<X509Svid>,
    bundle: TrustBundle,
    federated: Vec<TrustBundle>,
    entries: Vec<RegistrationEntry>,
}

type CacheKey = (String, SpiffeId);

#[derive(Default)]
struct Backoff {
    failures: u32,
    retry_at: i64,
}

const MAX_BACKOFF_SECONDS: i64 = 64;

enum CallError {
    Unreachable(String),
    Rejected(WireError),
}

impl CallError {
    fn into_agent_error(self) -> AgentError {
        match self {
            CallError::Unreachable(m) => AgentError::ServerUnreachable(m),
            CallError::Rejected(e) => AgentError::ServerRejected(e.code),
        }
    }
}

pub struct Agent {
    link: Arc<dyn ServerLink>,
    settings: AgentSettings,
    plugins: Vec<Box<dyn SelectorPlugin>>,
    anchor: TrustBundle,
    node: RwLock<Option<Arc<NodeState>>>,
    workloads: RwLock<BTreeMap<String, WorkloadInfo>>,
    cache: RwLock<BTreeMap<CacheKey, Arc<X509Svid>>>,
    /// Serializes cache and node-state mutations.
    writer: Mutex<Backoff>,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("id", &self.agent_svid().map(|s| s.spiffe_id.clone()))
            .finish_non_exhaustive()
    }
}

fn read<T>(lock: &RwLock<T>) -> std::sync::RwLockReadGuard<'_, T> {
    lock.read().unwrap_or_else(|p| p.into_inner())
}

fn write<T>(lock: &RwLock<T>) -> std::sync::RwLockWriteGuard<'_, T> {
    lock.write().unwrap_or_else(|p| p.into_inner())
}

impl Agent {
    /// `anchor` authenticates the server until node attestation delivers a bundle.
    pub fn new(
        link: Arc<dyn ServerLink>,
        settings: AgentSettings,
        anchor: TrustBundle,
    ) -> Result<Self, AgentError> {
        if !(settings.rotation_threshold > 0.0 && settings.rotation_threshold <= 1.0) {
            return Err(AgentError::BadSettings(
                "rotation_threshold must be in (0, 1]".to_owned(),
            ));
        }
        let plugins = settings
            .plugins
            .iter()
            .map(|n| {
                plugin_by_name(n)
                    .ok_or_else(|| AgentError::BadSettings(format!("unknown plugin {n}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Agent {
            link,
            settings,
            plugins,
            anchor,
            node: RwLock::new(None),
            workloads: RwLock::new(BTreeMap::new()),
            cache: RwLock::new(BTreeMap::new()),
            writer: Mutex::new(Backoff::default()),
        })
    }

    pub fn settings(&self) -> &AgentSettings {
        &self.settings
    }

    /// Binds caller metadata to a handle. Rebinding replaces it.
    pub fn bind_workload(&self, handle: &str, info: WorkloadInfo) {
        write(&self.workloads).insert(handle.to_owned(), info);
    }

    /// Forgets a handle and every SVID cached for it.
    pub fn unbind_workload(&self, handle: &str) {
        let _guard = self.lock_writer();
        write(&self.workloads).remove(handle);
        write(&self.cache).retain(|(h, _), _| h != handle);
    }

    pub fn is_bound(&self, handle: &str) -> bool {
        read(&self.workloads).contains_key(handle)
    }

    /// Plugin-resolved selectors. Unknown handles have none.
    pub fn selectors_for(&self, handle: &str) -> SelectorSet {
        read(&self.workloads)
            .get(handle)
            .map(|info| resolve_selectors(&self.plugins, info))
            .unwrap_or_default()
    }

    pub fn agent_svid(&self) -> Option<Arc<X509Svid>> {
        read(&self.node).as_ref().map(|n| n.svid.clone())
    }

    /// Own bundle and federated bundles as last received.
    pub fn bundles(&self) -> Option<(TrustBundle, Vec<TrustBundle>)> {
        read(&self.node)
            .as_ref()
            .map(|n| (n.bundle.clone(), n.federated.clone()))
    }

    /// SVIDs currently cached for `handle`, by SPIFFE ID.
    pub fn cached(&self, handle: &str) -> Vec<Arc<X509Svid>> {
        read(&self.cache)
            .iter()
            .filter(|((h, _), _)| h == handle)
            .map(|(_, s)| s.clone())
            .collect()
    }

    /// Earliest instant at which `rotation_tick` has work to do.
    pub fn next_rotation_at(&self) -> Option<i64> {
        let t = self.settings.rotation_threshold;
        let agent = self.agent_svid().map(|s| rotate_at(&s, t));
        let cached = read(&self.cache).values().map(|s| rotate_at(s, t)).min();
        agent.into_iter().chain(cached).min()
    }

    fn lock_writer(&self) -> std::sync::MutexGuard<'_, Backoff> {
        self.writer.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn node(&self) -> Result<Arc<NodeState>, AgentError> {
        read(&self.node)
            .clone()
            .ok_or(AgentError::AgentNotBootstrapped)
    }

    fn call<T: DeserializeOwned>(
        &self,
        req: &ServerRequest,
        identity: Option<&X509Svid>,
        trust: &TrustBundle,
        now: i64,
    ) -> Result<T, CallError> {
        let frame = serde_json::to_vec(req).expect("requests serialize");
        let bytes = self
            .link
            .call(&frame, identity, trust, now)
            .map_err(|Unreachable(m)| CallError::Unreachable(m))?;
        Response::from_bytes(&bytes)
            .map_err(CallError::Rejected)?
            .into_result()
            .map_err(CallError::Rejected)
    }

    /// Node-attests with a join token. Replaces any earlier agent SVID and
    /// clears the cache.
    pub fn bootstrap(&self, join_token: &str, now: i64) -> Result<SpiffeId, AgentError> {
        let key = KeyPair::generate(self.settings.key_algorithm)
            .map_err(|e| AgentError::NodeAttestFailed(e.to_string()))?;
        let trust = self
            .bundles()
            .map(|(b, _)| b)
            .unwrap_or_else(|| self.anchor.clone());
        let req = ServerRequest::NodeAttest {
            join_token: join_token.to_owned(),
            public_key: b64::encode(key.spki()),
        };
        let resp: NodeAttestResponse = self.call(&req, None, &trust, now).map_err(|e| match e {
            CallError::Unreachable(m) => AgentError::ServerUnreachable(m),
            CallError::Rejected(w) => AgentError::NodeAttestFailed(w.code),
        })?;
        let svid = X509Svid::assemble(resp.svid, key)
            .map_err(|e| AgentError::NodeAttestFailed(e.to_string()))?;
        let id = svid.spiffe_id.clone();
        let _guard = self.lock_writer();
        *write(&self.node) = Some(Arc::new(NodeState {
            svid: Arc::new(svid),
            bundle: resp.bundle,
            federated: Vec::new(),
            entries: Vec::new(),
        }));
        write(&self.cache).clear();
        Ok(id)
    }

    /// Refreshes entries and bundles. On failure the previous view is kept.
    fn sync(&self, node: Arc<NodeState>, now: i64) -> Arc<NodeState> {
        let resp: SyncResponse =
            match self.call(&ServerRequest::Entries, Some(&node.svid), &node.bundle, now) {
                Ok(r) => r,
                Err(_) => return node,
            };
        let _guard = self.lock_writer();
        let mut slot = write(&self.node);
        let current = slot.clone().unwrap_or(node);
        let next = Arc::new(NodeState {
            svid: current.svid.clone(),
            bundle: resp.bundle,
            federated: resp.federated_bundles,
            entries: resp.entries,
        });
        *slot = Some(next.clone());
        next
    }

    /// Distinct identities the workload qualifies for, in SPIFFE ID order.
    fn identities(&self, node: &NodeState, handle: &str, now: i64) -> Vec<SpiffeId> {
        let selectors = self.selectors_for(handle);
        attest_workload(&node.entries, &node.svid.spiffe_id, &selectors, now)
            .into_iter()
            .map(|a| a.spiffe_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Asks the server for X.509-SVIDs over fresh keys. Per-item refusals
    /// come back as `None`.
    fn mint_x509(
        &self,
        node: &NodeState,
        ids: &[SpiffeId],
        now: i64,
    ) -> Result<Vec<Option<X509Svid>>, CallError> {
        let keys = ids
            .iter()
            .map(|_| KeyPair::generate(self.settings.key_algorithm))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CallError::Unreachable(e.to_string()))?;
        let requests = ids
            .iter()
            .zip(&keys)
            .map(|(id, key)| SignRequest {
                spiffe_id: id.to_string(),
                kind: SvidKind::X509,
                audiences: vec![],
                public_key: Some(b64::encode(key.spki())),
            })
            .collect();
        let resp: SignResponse = self.call(
            &ServerRequest::Sign { requests },
            Some(&node.svid),
            &node.bundle,
            now,
        )?;
        let mut out: Vec<Option<X509Svid>> = resp
            .results
            .into_iter()
            .zip(keys)
            .map(|(item, key)| match item.into_result() {
                Ok(SignedSvid::X509 { cert }) => X509Svid::assemble(cert, key).ok(),
                _ => None,
            })
            .collect();
        out.resize_with(ids.len(), || None);
        Ok(out)
    }

    /// Workload API `fetch_x509`. Fresh cache entries are served as is;
    /// entries past the rotation threshold are re-minted, falling back to
    /// the cached SVID while it is still servable.
    pub fn fetch_x509(&self, handle: &str, now: i64) -> Result<X509Response, AgentError> {
        let node = self.sync(self.node()?, now);
        let ids = self.identities(&node, handle, now);
        if ids.is_empty() {
            return Err(AgentError::NoIdentity);
        }
        let threshold = self.settings.rotation_threshold;
        let cached: Vec<Option<Arc<X509Svid>>> = {
            let cache = read(&self.cache);
            ids.iter()
                .map(|id| cache.get(&(handle.to_owned(), id.clone())).cloned())
                .collect()
        };
        let due: Vec<SpiffeId> = ids
            .iter()
            .zip(&cached)
            .filter(|(_, c)| c.as_ref().is_none_or(|s| now >= rotate_at(s, threshold)))
            .map(|(id, _)| id.clone())
            .collect();

        let mut minted = BTreeMap::new();
        if !due.is_empty() {
            let _guard = self.lock_writer();
            if let Ok(fresh) = self.mint_x509(&node, &due, now) {
                let mut cache = write(&self.cache);
                for (id, svid) in due.iter().zip(fresh) {
                    if let Some(svid) = svid {
                        let svid = Arc::new(svid);
                        cache.insert((handle.to_owned(), id.clone()), svid.clone());
                        minted.insert(id.clone(), svid);
                    }
                }
            }
        }
        {
            let keep: BTreeSet<&SpiffeId> = ids.iter().collect();
            let _guard = self.lock_writer();
            write(&self.cache).retain(|(h, id), _| h != handle || keep.contains(id));
        }

        let svids: Vec<X509Svid> = ids
            .iter()
            .zip(cached)
            .filter_map(|(id, old)| minted.get(id).cloned().or(old))
            .filter(|s| servable(s, now))
            .map(|s| (*s).clone())
            .collect();
        if svids.is_empty() {
            return Err(AgentError::NoIdentity);
        }
        Ok(X509Response {
            svids,
            bundle: node.bundle.clone(),
            federated_bundles: node.federated.clone(),
        })
    }

    /// Workload API `fetch_jwt`: one token per identity, never cached.
    pub fn fetch_jwt(
        &self,
        handle: &str,
        audiences: &[String],
        now: i64,
    ) -> Result<Vec<JwtSvid>, AgentError> {
        if audiences.is_empty() || audiences.iter().any(String::is_empty) {
            return Err(AgentError::EmptyAudience);
        }
        let node = self.sync(self.node()?, now);
        let ids = self.identities(&node, handle, now);
        if ids.is_empty() {
            return Err(AgentError::NoIdentity);
        }
        let requests = ids
            .iter()
            .map(|id| SignRequest {
                spiffe_id: id.to_string(),
                kind: SvidKind::Jwt,
                audiences: audiences.to_vec(),
                public_key: None,
            })
            .collect();
        let resp: SignResponse = self
            .call(
                &ServerRequest::Sign { requests },
                Some(&node.svid),
                &node.bundle,
                now,
            )
            .map_err(CallError::into_agent_error)?;
        let tokens: Vec<JwtSvid> = resp
            .results
            .into_iter()
            .filter_map(|item| match item.into_result() {
                Ok(SignedSvid::Jwt { token }) => Some(token),
                _ => None,
            })
            .collect();
        if tokens.is_empty() {
            return Err(AgentError::NoIdentity);
        }
        Ok(tokens)
    }

    /// Asks the server for `id` directly, skipping local attestation. This
    /// is what a compromised agent could do; the server still enforces
    /// that the agent parents an entry for `id`.
    pub fn request_x509(&self, id: &SpiffeId, now: i64) -> Result<X509Svid, AgentError> {
        let node = self.node()?;
        let key = KeyPair::generate(self.settings.key_algorithm)
            .map_err(|e| AgentError::ServerRejected(e.to_string()))?;
        let requests = vec![SignRequest {
            spiffe_id: id.to_string(),
            kind: SvidKind::X509,
            audiences: vec![],
            public_key: Some(b64::encode(key.spki())),
        }];
        let resp: SignResponse = self
            .call(
                &ServerRequest::Sign { requests },
                Some(&node.svid),
                &node.bundle,
                now,
            )
            .map_err(CallError::into_agent_error)?;
        let item = resp
            .results
            .into_iter()
            .next()
            .ok_or_else(|| AgentError::ServerRejected("BadResponse".to_owned()))?;
        match item.into_result() {
            Ok(SignedSvid::X509 { cert }) => {
                X509Svid::assemble(cert, key).map_err(|e| AgentError::ServerRejected(e.to_string()))
            }
            Ok(SignedSvid::Jwt { .. }) => Err(AgentError::ServerRejected("BadResponse".to_owned())),
            Err(e) => Err(AgentError::ServerRejected(e.code)),
        }
    }

    /// Re-mints every SVID past the rotation threshold, the agent's own
    /// first. On an unreachable server the cache is kept and further ticks
    /// are refused until an exponential backoff elapses.
    pub fn rotation_tick(&self, now: i64) -> Result<Vec<Rotation>, AgentError> {
        let node = self.node()?;
        let threshold = self.settings.rotation_threshold;
        let mut backoff = self.lock_writer();
        if now < backoff.retry_at {
            return Err(AgentError::ServerUnreachable(format!(
                "backing off until {}",
                backoff.retry_at
            )));
        }
        let outcome = self.rotate_locked(node, threshold, now);
        match &outcome {
            Err(AgentError::ServerUnreachable(_)) => {
                backoff.failures = backoff.failures.saturating_add(1);
                let delay = 1i64
                    .checked_shl(backoff.failures.min(6))
                    .unwrap_or(MAX_BACKOFF_SECONDS)
                    .min(MAX_BACKOFF_SECONDS);
                backoff.retry_at = now + delay;
            }
            _ => *backoff = Backoff::default(),
        }
        outcome
    }

    fn rotate_locked(
        &self,
        mut node: Arc<NodeState>,
        threshold: f64,
        now: i64,
    ) -> Result<Vec<Rotation>, AgentError> {
        let mut rotated = Vec::new();
        if now >= rotate_at(&node.svid, threshold) {
            let key = KeyPair::generate(self.settings.key_algorithm)
                .map_err(|e| AgentError::ServerRejected(e.to_string()))?;
            let req = ServerRequest::RenewAgent {
                public_key: b64::encode(key.spki()),
            };
            let cert: IssuedCert = self
                .call(&req, Some(&node.svid), &node.bundle, now)
                .map_err(CallError::into_agent_error)?;
            let svid = X509Svid::assemble(cert, key)
                .map_err(|e| AgentError::ServerRejected(e.to_string()))?;
            rotated.push(Rotation {
                handle: None,
                spiffe_id: svid.spiffe_id.clone(),
                issued_at: svid.issued_at,
                not_after: svid.not_after,
            });
            node = Arc::new(NodeState {
                svid: Arc::new(svid),
                bundle: node.bundle.clone(),
                federated: node.federated.clone(),
                entries: node.entries.clone(),
            });
            *write(&self.node) = Some(node.clone());
        }

        let due: Vec<CacheKey> = read(&self.cache)
            .iter()
            .filter(|(_, s)| now >= rotate_at(s, threshold))
            .map(|(k, _)| k.clone())
            .collect();
        if due.is_empty() {
            return Ok(rotated);
        }
        let ids: Vec<SpiffeId> = due.iter().map(|(_, id)| id.clone()).collect();
        let fresh = self
            .mint_x509(&node, &ids, now)
            .map_err(CallError::into_agent_error)?;
        let mut cache = write(&self.cache);
        for (key, svid) in due.into_iter().zip(fresh) {
            let Some(svid) = svid else { continue };
            rotated.push(Rotation {
                handle: Some(key.0.clone()),
                spiffe_id: svid.spiffe_id.clone(),
                issued_at: svid.issued_at,
                not_after: svid.not_after,
            });
            cache.insert(key, Arc::new(svid));
        }
        Ok(rotated)
    }
}
