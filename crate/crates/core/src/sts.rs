//! Mock token service exchanging JWT-SVIDs for short-lived scoped credentials.

use std::collections::BTreeMap;
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use ring::hmac;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::crypto::{verify_jwt_svid, JwtError, TrustBundle};
use crate::id::{SpiffeId, SpiffeIdPattern, TrustDomain};
use crate::policy::StringPattern;
use crate::wire::{decode_request, read_frame, write_frame, Response, WireError};

pub const DEFAULT_MAX_SESSION_SECONDS: i64 = 900;
pub const ASSUME_ROLE_ACTION: &str = "sts:AssumeRoleWithWebIdentity";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StsError {
    #[error("token rejected: {0}")]
    TokenInvalid(JwtError),
    #[error("issuer is not trusted by this role")]
    IssuerNotTrusted,
    #[error("subject does not satisfy the role's condition")]
    SubjectMismatch,
    #[error("no such role")]
    UnknownRole,
    #[error("invalid trust policy: {0}")]
    BadPolicy(String),
}

impl StsError {
    pub fn code(&self) -> String {
        match self {
            StsError::TokenInvalid(e) => format!("TokenInvalid({})", e.code()),
            StsError::IssuerNotTrusted => "IssuerNotTrusted".to_owned(),
            StsError::SubjectMismatch => "SubjectMismatch".to_owned(),
            StsError::UnknownRole => "UnknownRole".to_owned(),
            StsError::BadPolicy(_) => "BadPolicy".to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Permission {
    pub action: String,
    /// Exact resource, or a prefix ending in `**`.
    pub resource: String,
}

impl Permission {
    pub fn new(action: &str, resource: &str) -> Self {
        Permission {
            action: action.to_owned(),
            resource: resource.to_owned(),
        }
    }

    fn covers(&self, action: &str, resource: &str) -> bool {
        self.action == action
            && StringPattern::parse(&self.resource).is_ok_and(|p| p.matches(resource))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubjectCondition {
    /// `StringEquals`: the subject must equal this ID.
    Equals(SpiffeId),
    /// `StringLike`: the subject must match this pattern.
    Like(SpiffeIdPattern),
}

impl SubjectCondition {
    pub fn admits(&self, sub: &SpiffeId) -> bool {
        match self {
            SubjectCondition::Equals(id) => id == sub,
            SubjectCondition::Like(p) => p.matches(sub),
        }
    }
}

/// Role trust policy. `required_audience` and `permissions` are non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StsTrustPolicy {
    pub role_name: String,
    /// Issuer string a token's `iss` must equal, e.g. `spiffe://org.example`.
    pub federated_issuer: String,
    pub required_audience: String,
    pub subject_condition: SubjectCondition,
    pub permissions: Vec<Permission>,
    pub max_session_seconds: i64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDoc {
    role_name: String,
    #[serde(rename = "Federated")]
    federated: String,
    #[serde(rename = "Action")]
    action: String,
    #[serde(rename = "Condition")]
    condition: ConditionDoc,
    permissions: Vec<Permission>,
    #[serde(default = "default_session")]
    max_session_seconds: i64,
}

fn default_session() -> i64 {
    DEFAULT_MAX_SESSION_SECONDS
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConditionDoc {
    #[serde(rename = "StringEquals")]
    string_equals: BTreeMap<String, String>,
    #[serde(
        rename = "StringLike",
        default,
        skip_serializing_if = "BTreeMap::is_empty"
    )]
    string_like: BTreeMap<String, String>,
}

/// Finds `sub` or `<provider>:sub`.
fn claim<'a>(map: &'a BTreeMap<String, String>, name: &str) -> Option<&'a String> {
    map.iter()
        .find(|(k, _)| *k == name || k.rsplit_once(':').is_some_and(|(_, tail)| tail == name))
        .map(|(_, v)| v)
}

impl TryFrom<PolicyDoc> for StsTrustPolicy {
    type Error = StsError;

    fn try_from(doc: PolicyDoc) -> Result<Self, StsError> {
        let bad = |m: &str| StsError::BadPolicy(m.to_owned());
        if doc.action != ASSUME_ROLE_ACTION {
            return Err(bad("Action must be sts:AssumeRoleWithWebIdentity"));
        }
        SpiffeId::parse(&doc.federated).map_err(|_| bad("Federated must be a SPIFFE ID"))?;
        let eq = &doc.condition.string_equals;
        let like = &doc.condition.string_like;
        let required_audience = claim(eq, "aud")
            .filter(|a| !a.is_empty())
            .ok_or_else(|| bad("StringEquals must name a non-empty aud"))?
            .clone();
        let subject_condition = match (claim(eq, "sub"), claim(like, "sub")) {
            (Some(s), None) => SubjectCondition::Equals(
                SpiffeId::parse(s).map_err(|_| bad("StringEquals sub must be a SPIFFE ID"))?,
            ),
            (None, Some(p)) => SubjectCondition::Like(
                SpiffeIdPattern::parse(p).map_err(|_| bad("StringLike sub must be a pattern"))?,
            ),
            _ => return Err(bad("exactly one sub condition is required")),
        };
        if doc.permissions.is_empty() {
            return Err(bad("permissions must not be empty"));
        }
        if doc
            .permissions
            .iter()
            .any(|p| p.action.is_empty() || StringPattern::parse(&p.resource).is_err())
        {
            return Err(bad("permission with empty action or bad resource"));
        }
        if doc.max_session_seconds <= 0 {
            return Err(bad("max_session_seconds must be positive"));
        }
        Ok(StsTrustPolicy {
            role_name: doc.role_name,
            federated_issuer: doc.federated,
            required_audience,
            subject_condition,
            permissions: doc.permissions,
            max_session_seconds: doc.max_session_seconds,
        })
    }
}

impl From<&StsTrustPolicy> for PolicyDoc {
    fn from(p: &StsTrustPolicy) -> Self {
        let mut string_equals = BTreeMap::new();
        let mut string_like = BTreeMap::new();
        string_equals.insert("aud".to_owned(), p.required_audience.clone());
        match &p.subject_condition {
            SubjectCondition::Equals(id) => string_equals.insert("sub".to_owned(), id.to_string()),
            SubjectCondition::Like(pat) => string_like.insert("sub".to_owned(), pat.to_string()),
        };
        PolicyDoc {
            role_name: p.role_name.clone(),
            federated: p.federated_issuer.clone(),
            action: ASSUME_ROLE_ACTION.to_owned(),
            condition: ConditionDoc {
                string_equals,
                string_like,
            },
            permissions: p.permissions.clone(),
            max_session_seconds: p.max_session_seconds,
        }
    }
}

impl Serialize for StsTrustPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PolicyDoc::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for StsTrustPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        PolicyDoc::deserialize(d)?
            .try_into()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopedCredentials {
    pub credential_id: String,
    pub secret: String,
    pub session_token: String,
    pub issued_at: i64,
    pub expires_at: i64,
    pub granted: Vec<Permission>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionClaims {
    v: u32,
    role: String,
    sub: String,
    exp: i64,
    nonce: String,
    granted: Vec<Permission>,
}

const SESSION_VERSION: u32 = 1;

/// Token service holding role policies, issuer bundles, and a session key.
pub struct Broker {
    roles: BTreeMap<String, StsTrustPolicy>,
    issuers: BTreeMap<TrustDomain, TrustBundle>,
    key: hmac::Key,
    rng: ChaCha20Rng,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker")
            .field("roles", &self.roles.keys().collect::<Vec<_>>())
            .field("issuers", &self.issuers.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl Broker {
    /// Deterministic broker: the session key and all credential values derive from `seed`.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        Broker {
            roles: BTreeMap::new(),
            issuers: BTreeMap::new(),
            key: hmac::Key::new(hmac::HMAC_SHA256, &key),
            rng,
        }
    }

    pub fn add_role(&mut self, policy: StsTrustPolicy) {
        self.roles.insert(policy.role_name.clone(), policy);
    }

    pub fn role(&self, name: &str) -> Option<&StsTrustPolicy> {
        self.roles.get(name)
    }

    /// Installs or replaces the bundle used to verify tokens from its trust domain.
    pub fn set_issuer_bundle(&mut self, bundle: TrustBundle) {
        self.issuers.insert(bundle.trust_domain.clone(), bundle);
    }

    pub fn assume_role(
        &mut self,
        role: &str,
        token: &str,
        now: i64,
    ) -> Result<ScopedCredentials, StsError> {
        let policy = self.roles.get(role).ok_or(StsError::UnknownRole)?.clone();
        let issuer_td = SpiffeId::parse(&policy.federated_issuer)
            .map_err(|_| StsError::IssuerNotTrusted)?
            .trust_domain()
            .clone();
        let bundle = self
            .issuers
            .get(&issuer_td)
            .ok_or(StsError::IssuerNotTrusted)?
            .clone();
        self.assume_role_with_web_identity(&policy, token, &bundle, now)
    }

    /// Verifies `token` under `policy` and mints credentials carrying exactly
    /// the policy's permissions.
    pub fn assume_role_with_web_identity(
        &mut self,
        policy: &StsTrustPolicy,
        token: &str,
        issuer_bundle: &TrustBundle,
        now: i64,
    ) -> Result<ScopedCredentials, StsError> {
        let claims = verify_jwt_svid(token, issuer_bundle, &policy.required_audience, now)
            .map_err(StsError::TokenInvalid)?;
        if claims.iss != policy.federated_issuer {
            return Err(StsError::IssuerNotTrusted);
        }
        let sub = SpiffeId::parse(&claims.sub)
            .map_err(|_| StsError::TokenInvalid(JwtError::MalformedToken))?;
        if !policy.subject_condition.admits(&sub) {
            return Err(StsError::SubjectMismatch);
        }
        let expires_at = now + policy.max_session_seconds;
        let session = SessionClaims {
            v: SESSION_VERSION,
            role: policy.role_name.clone(),
            sub: claims.sub,
            exp: expires_at,
            nonce: self.random_token(16),
            granted: policy.permissions.clone(),
        };
        let payload = URL_SAFE_NO_PAD.encode(serde_json::to_vec(&session).expect("serializes"));
        let tag = hmac::sign(&self.key, payload.as_bytes());
        Ok(ScopedCredentials {
            credential_id: format!("msc-{}", self.random_token(12)),
            secret: self.random_token(30),
            session_token: format!("{payload}.{}", URL_SAFE_NO_PAD.encode(tag.as_ref())),
            issued_at: now,
            expires_at,
            granted: policy.permissions.clone(),
        })
    }

    /// True iff the session token authenticates, is unexpired, and grants
    /// the action on the resource. Grants are read from the token, never
    /// from the client-held copy.
    pub fn validate_session(
        &self,
        credentials: &ScopedCredentials,
        action: &str,
        resource: &str,
        now: i64,
    ) -> bool {
        let Some((payload, tag)) = credentials.session_token.split_once('.') else {
            return false;
        };
        let Ok(tag) = URL_SAFE_NO_PAD.decode(tag) else {
            return false;
        };
        if hmac::verify(&self.key, payload.as_bytes(), &tag).is_err() {
            return false;
        }
        let Some(claims) = URL_SAFE_NO_PAD
            .decode(payload)
            .ok()
            .and_then(|b| serde_json::from_slice::<SessionClaims>(&b).ok())
        else {
            return false;
        };
        claims.v == SESSION_VERSION
            && now < claims.exp
            && claims.granted.iter().any(|p| p.covers(action, resource))
    }

    fn random_token(&mut self, bytes: usize) -> String {
        let mut buf = vec![0u8; bytes];
        self.rng.fill(buf.as_mut_slice());
        URL_SAFE_NO_PAD.encode(buf)
    }

    /// Serves one framed broker request.
    pub fn handle_frame(&mut self, frame: &[u8], now: i64) -> Vec<u8> {
        let resp = match decode_request::<BrokerRequest>(frame) {
            Err(resp) => resp,
            Ok(BrokerRequest::AssumeRole { role, token }) => {
                match self.assume_role(&role, &token, now) {
                    Ok(creds) => Response::success(&creds),
                    Err(e) => Response::failure(&e.code(), e.to_string()),
                }
            }
        };
        resp.to_bytes()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum BrokerRequest {
    AssumeRole { role: String, token: String },
}

/// Serves framed broker requests over plain TCP, one thread per connection.
pub fn serve_broker(broker: Arc<Mutex<Broker>>, listener: TcpListener, clock: Arc<dyn Clock>) {
    for stream in listener.incoming() {
        let Ok(mut stream) = stream else { continue };
        let (broker, clock) = (broker.clone(), clock.clone());
        thread::spawn(move || {
            while let Ok(Some(frame)) = read_frame(&mut stream) {
                let reply = broker
                    .lock()
                    .unwrap_or_else(|p| p.into_inner())
                    .handle_frame(&frame, clock.now());
                if write_frame(&mut stream, &reply).is_err() {
                    break;
                }
            }
        });
    }
}

/// Sends one `assume_role` request to a broker endpoint.
pub fn request_credentials(
    addr: impl ToSocketAddrs,
    role: &str,
    token: &str,
) -> Result<ScopedCredentials, WireError> {
    let io = |e: std::io::Error| WireError {
        code: "Unreachable".into(),
        message: e.to_string(),
    };
    let mut stream = TcpStream::connect(addr).map_err(io)?;
    let req = BrokerRequest::AssumeRole {
        role: role.to_owned(),
        token: token.to_owned(),
    };
    write_frame(
        &mut stream,
        &serde_json::to_vec(&req).expect("request serializes"),
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
