use std::sync::Arc;

use rcgen::{
    BasicConstraints, CertificateParams, DistinguishedName, DnType, ExtendedKeyUsagePurpose, IsCa,
    KeyUsagePurpose, SanType, SerialNumber,
};
use serde::{Deserialize, Serialize};
use time::OffsetDateTime;

use super::bundle::{JwtKey, TrustBundle};
use super::jwt::{self, JwtSvid};
use super::keys::{key_id, parse_spki, KeyAlgorithm, KeyPair};
use super::{
    b64, IssueError, CLOCK_SKEW_SECONDS, JWT_TTL_CAP, ROOT_LIFETIME_SECONDS, X509_TTL_CAP,
};
use crate::id::{SpiffeId, TrustDomain};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuthorityConfig {
    pub algorithm: KeyAlgorithm,
    pub x509_default_ttl: i64,
    pub x509_max_ttl: i64,
    pub jwt_default_ttl: i64,
    pub jwt_max_ttl: i64,
    /// Overlap during which a rotated-out JWT key stays published.
    /// `None` means twice `jwt_max_ttl`.
    pub jwt_key_overlap: Option<i64>,
    pub refresh_hint: u64,
}

impl Default for AuthorityConfig {
    fn default() -> Self {
        AuthorityConfig {
            algorithm: KeyAlgorithm::Ed25519,
            x509_default_ttl: 3600,
            x509_max_ttl: X509_TTL_CAP,
            jwt_default_ttl: 300,
            jwt_max_ttl: 300,
            jwt_key_overlap: None,
            refresh_hint: 300,
        }
    }
}

impl AuthorityConfig {
    pub fn validate(&self) -> Result<(), IssueError> {
        let ok = (1..=X509_TTL_CAP).contains(&self.x509_max_ttl)
            && (1..=self.x509_max_ttl).contains(&self.x509_default_ttl)
            && (1..=JWT_TTL_CAP).contains(&self.jwt_max_ttl)
            && (1..=self.jwt_max_ttl).contains(&self.jwt_default_ttl)
            && self.jwt_key_overlap.is_none_or(|o| o >= 0);
        if ok {
            Ok(())
        } else {
            Err(IssueError::BadConfig)
        }
    }

    pub fn overlap(&self) -> i64 {
        self.jwt_key_overlap.unwrap_or(2 * self.jwt_max_ttl)
    }
}

#[derive(Debug, Clone)]
struct SigningKey {
    kid: String,
    key: Arc<KeyPair>,
    /// Set once the key is rotated out; dropped from the bundle at this time.
    retire_at: Option<i64>,
}

/// Signing authority for a single trust domain.
///
/// Values are immutable; rotation and pruning return a new authority with
/// an incremented bundle sequence.
#[derive(Clone)]
pub struct Authority {
    trust_domain: TrustDomain,
    config: AuthorityConfig,
    ca_key: Arc<KeyPair>,
    root: Arc<rcgen::Certificate>,
    root_der: Vec<u8>,
    jwt_keys: Vec<SigningKey>,
    sequence: u64,
}

impl std::fmt::Debug for Authority {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Authority")
            .field("trust_domain", &self.trust_domain)
            .field("sequence", &self.sequence)
            .field(
                "jwt_kids",
                &self.jwt_keys.iter().map(|k| &k.kid).collect::<Vec<_>>(),
            )
            .finish_non_exhaustive()
    }
}

fn datetime(ts: i64) -> Result<OffsetDateTime, IssueError> {
    OffsetDateTime::from_unix_timestamp(ts).map_err(|_| IssueError::TtlOutOfRange)
}

fn random_serial() -> SerialNumber {
    let mut bytes: [u8; 16] = rand::random();
    bytes[0] &= 0x7f;
    bytes[0] |= 0x01;
    SerialNumber::from_slice(&bytes)
}

fn uri_san(id: &SpiffeId) -> Result<SanType, IssueError> {
    let uri = id
        .to_string()
        .try_into()
        .map_err(|_| IssueError::Certificate)?;
    Ok(SanType::URI(uri))
}

pub fn create_authority(
    trust_domain: TrustDomain,
    config: AuthorityConfig,
    now: i64,
) -> Result<Authority, IssueError> {
    Authority::create(trust_domain, config, now)
}

impl Authority {
    pub fn create(
        trust_domain: TrustDomain,
        config: AuthorityConfig,
        now: i64,
    ) -> Result<Self, IssueError> {
        config.validate()?;
        let ca_key = KeyPair::generate(config.algorithm)?;
        let rc_key = ca_key.to_rcgen()?;

        let mut params = CertificateParams::default();
        let mut dn = DistinguishedName::new();
        dn.push(DnType::OrganizationName, "SPIFFE");
        dn.push(DnType::CommonName, trust_domain.as_str());
        params.distinguished_name = dn;
        params.serial_number = Some(random_serial());
        params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
        params.key_usages = vec![
            KeyUsagePurpose::KeyCertSign,
            KeyUsagePurpose::CrlSign,
            KeyUsagePurpose::DigitalSignature,
        ];
        params.subject_alt_names = vec![uri_san(&trust_domain.id())?];
        params.not_before = datetime(now - CLOCK_SKEW_SECONDS)?;
        params.not_after = datetime(now + ROOT_LIFETIME_SECONDS)?;
        let root = params
            .self_signed(&rc_key)
            .map_err(|_| IssueError::Certificate)?;
        let root_der = root.der().to_vec();

        let jwt_key = KeyPair::generate(config.algorithm)?;
        Ok(Authority {
            trust_domain,
            config,
            ca_key: Arc::new(ca_key),
            root: Arc::new(root),
            root_der,
            jwt_keys: vec![SigningKey {
                kid: key_id(jwt_key.spki()),
                key: Arc::new(jwt_key),
                retire_at: None,
            }],
            sequence: 1,
        })
    }

    pub fn trust_domain(&self) -> &TrustDomain {
        &self.trust_domain
    }

    pub fn config(&self) -> &AuthorityConfig {
        &self.config
    }

    pub fn ca_key(&self) -> &KeyPair {
        &self.ca_key
    }

    pub fn root_der(&self) -> &[u8] {
        &self.root_der
    }

    pub fn sequence(&self) -> u64 {
        self.sequence
    }

    /// Kid of the key currently used for signing.
    pub fn active_kid(&self) -> &str {
        &self.active_key().kid
    }

    fn active_key(&self) -> &SigningKey {
        self.jwt_keys
            .last()
            .expect("authority always holds an active key")
    }

    pub fn bundle(&self) -> TrustBundle {
        TrustBundle {
            trust_domain: self.trust_domain.clone(),
            x509_roots: vec![self.root_der.clone()],
            jwt_keys: self
                .jwt_keys
                .iter()
                .map(|k| JwtKey {
                    kid: k.kid.clone(),
                    alg: k.key.algorithm(),
                    spki: k.key.spki().to_vec(),
                })
                .collect(),
            sequence: self.sequence,
            refresh_hint: self.config.refresh_hint,
        }
    }

    pub fn mint_x509_svid(
        &self,
        id: &SpiffeId,
        ttl_seconds: i64,
        now: i64,
    ) -> Result<X509Svid, IssueError> {
        let leaf_key = KeyPair::generate(self.config.algorithm)?;
        let cert = self.sign_x509_leaf(id, leaf_key.spki(), ttl_seconds, now)?;
        X509Svid::assemble(cert, leaf_key)
    }

    /// Certifies a caller-held public key (DER SubjectPublicKeyInfo) for `id`.
    pub fn sign_x509_leaf(
        &self,
        id: &SpiffeId,
        spki: &[u8],
        ttl_seconds: i64,
        now: i64,
    ) -> Result<IssuedCert, IssueError> {
        if !id.member_of(&self.trust_domain) {
            return Err(IssueError::ForeignTrustDomain);
        }
        if ttl_seconds <= 0 || ttl_seconds > self.config.x509_max_ttl {
            return Err(IssueError::TtlOutOfRange);
        }
        let (alg, raw) = parse_spki(spki).ok_or(IssueError::BadKey)?;
        let subject_key = SubjectKey {
            alg: alg.rcgen_alg(),
            raw,
        };

        let mut params = CertificateParams::default();
        let mut dn = DistinguishedName::new();
        dn.push(DnType::OrganizationName, "SPIFFE");
        params.distinguished_name = dn;
        params.serial_number = Some(random_serial());
        params.is_ca = IsCa::ExplicitNoCa;
        params.key_usages = vec![KeyUsagePurpose::DigitalSignature];
        params.extended_key_usages = vec![
            ExtendedKeyUsagePurpose::ServerAuth,
            ExtendedKeyUsagePurpose::ClientAuth,
        ];
        params.subject_alt_names = vec![uri_san(id)?];
        params.use_authority_key_identifier_extension = true;
        let not_before = now - CLOCK_SKEW_SECONDS;
        let not_after = now + ttl_seconds;
        params.not_before = datetime(not_before)?;
        params.not_after = datetime(not_after)?;

        let ca_rc = self.ca_key.to_rcgen()?;
        let cert = params
            .signed_by(&subject_key, &self.root, &ca_rc)
            .map_err(|_| IssueError::Certificate)?;

        Ok(IssuedCert {
            spiffe_id: id.clone(),
            cert_chain: vec![cert.der().to_vec()],
            not_before,
            not_after,
            issued_at: now,
        })
    }

    /// Mints a JWT-SVID. The subject is not required to live in this
    /// authority's trust domain; callers decide who may hold which ID.
    pub fn mint_jwt_svid(
        &self,
        id: &SpiffeId,
        audiences: &[String],
        ttl_seconds: i64,
        now: i64,
    ) -> Result<JwtSvid, IssueError> {
        if audiences.is_empty() || audiences.iter().any(String::is_empty) {
            return Err(IssueError::EmptyAudience);
        }
        if ttl_seconds <= 0 || ttl_seconds > self.config.jwt_max_ttl {
            return Err(IssueError::TtlOutOfRange);
        }
        let key = self.active_key();
        Ok(jwt::sign(
            &key.key,
            &key.kid,
            jwt::JwtClaims {
                aud: audiences.to_vec(),
                sub: id.to_string(),
                exp: now + ttl_seconds,
                iat: now,
                iss: self.trust_domain.id().to_string(),
            },
        ))
    }

    /// Adds a fresh JWT signing key. The previous key stays published for
    /// the configured overlap window.
    pub fn rotate_jwt_key(&self, now: i64) -> Result<Authority, IssueError> {
        let new_key = KeyPair::generate(self.config.algorithm)?;
        let overlap = self.config.overlap();
        let mut next = self.clone();
        for k in next.jwt_keys.iter_mut().filter(|k| k.retire_at.is_none()) {
            k.retire_at = Some(now + overlap);
        }
        let kid = key_id(new_key.spki());
        if next.jwt_keys.iter().any(|k| k.kid == kid) {
            return Err(IssueError::KeyGeneration);
        }
        next.jwt_keys.push(SigningKey {
            kid,
            key: Arc::new(new_key),
            retire_at: None,
        });
        next.sequence += 1;
        Ok(next)
    }

    /// Drops rotated-out keys whose overlap has elapsed. Returns `None` when
    /// nothing changed.
    pub fn prune(&self, now: i64) -> Option<Authority> {
        let expired = |k: &SigningKey| k.retire_at.is_some_and(|t| t <= now);
        if !self.jwt_keys.iter().any(expired) {
            return None;
        }
        let mut next = self.clone();
        next.jwt_keys.retain(|k| !expired(k));
        next.sequence += 1;
        Some(next)
    }

    /// Earliest time at which `prune` would change the key set.
    pub fn next_prune_at(&self) -> Option<i64> {
        self.jwt_keys.iter().filter_map(|k| k.retire_at).min()
    }
}

struct SubjectKey {
    alg: &'static rcgen::SignatureAlgorithm,
    raw: Vec<u8>,
}

impl rcgen::PublicKeyData for SubjectKey {
    fn der_bytes(&self) -> &[u8] {
        &self.raw
    }

    fn algorithm(&self) -> &rcgen::SignatureAlgorithm {
        self.alg
    }
}

/// A certificate issued over a caller-held key. Carries no private material.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuedCert {
    pub spiffe_id: SpiffeId,
    /// Leaf first.
    #[serde(with = "b64::vec")]
    pub cert_chain: Vec<Vec<u8>>,
    pub not_before: i64,
    pub not_after: i64,
    pub issued_at: i64,
}

/// An X.509-SVID: leaf certificate, optional intermediates and the leaf key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "X509SvidDoc", into = "X509SvidDoc")]
pub struct X509Svid {
    pub spiffe_id: SpiffeId,
    pub leaf: Vec<u8>,
    pub intermediates: Vec<Vec<u8>>,
    pub private_key: Arc<KeyPair>,
    pub not_before: i64,
    pub not_after: i64,
    pub issued_at: i64,
}

impl X509Svid {
    /// Pairs an issued certificate with the key it certifies.
    pub fn assemble(cert: IssuedCert, key: KeyPair) -> Result<Self, IssueError> {
        let mut chain = cert.cert_chain.into_iter();
        let leaf = chain.next().ok_or(IssueError::Certificate)?;
        let leaf_spki = {
            use x509_parser::prelude::FromDer;
            x509_parser::certificate::X509Certificate::from_der(&leaf)
                .map_err(|_| IssueError::Certificate)?
                .1
                .public_key()
                .raw
                .to_vec()
        };
        if leaf_spki != key.spki() {
            return Err(IssueError::BadKey);
        }
        Ok(X509Svid {
            spiffe_id: cert.spiffe_id,
            leaf,
            intermediates: chain.collect(),
            private_key: Arc::new(key),
            not_before: cert.not_before,
            not_after: cert.not_after,
            issued_at: cert.issued_at,
        })
    }

    pub fn lifetime(&self) -> i64 {
        self.not_after - self.issued_at
    }

    /// Leaf followed by intermediates.
    pub fn cert_chain(&self) -> Vec<Vec<u8>> {
        std::iter::once(self.leaf.clone())
            .chain(self.intermediates.iter().cloned())
            .collect()
    }

    pub fn serial(&self) -> Vec<u8> {
        use x509_parser::prelude::FromDer;
        x509_parser::certificate::X509Certificate::from_der(&self.leaf)
            .map(|(_, c)| c.raw_serial().to_vec())
            .unwrap_or_default()
    }
}

#[derive(Serialize, Deserialize)]
struct X509SvidDoc {
    spiffe_id: SpiffeId,
    #[serde(with = "b64::vec")]
    cert_chain: Vec<Vec<u8>>,
    key_alg: KeyAlgorithm,
    #[serde(with = "b64")]
    private_key: Vec<u8>,
    not_before: i64,
    not_after: i64,
    issued_at: i64,
}

impl From<X509Svid> for X509SvidDoc {
    fn from(s: X509Svid) -> Self {
        X509SvidDoc {
            cert_chain: s.cert_chain(),
            spiffe_id: s.spiffe_id,
            key_alg: s.private_key.algorithm(),
            private_key: s.private_key.pkcs8().to_vec(),
            not_before: s.not_before,
            not_after: s.not_after,
            issued_at: s.issued_at,
        }
    }
}

impl TryFrom<X509SvidDoc> for X509Svid {
    type Error = String;
    fn try_from(d: X509SvidDoc) -> Result<Self, Self::Error> {
        let mut chain = d.cert_chain.into_iter();
        let leaf = chain.next().ok_or("empty certificate chain")?;
        let key = KeyPair::from_pkcs8(d.key_alg, &d.private_key).map_err(|e| e.to_string())?;
        Ok(X509Svid {
            spiffe_id: d.spiffe_id,
            leaf,
            intermediates: chain.collect(),
            private_key: Arc::new(key),
            not_before: d.not_before,
            not_after: d.not_after,
            issued_at: d.issued_at,
        })
    }
}
