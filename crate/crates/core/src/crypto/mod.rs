//! Per-trust-domain certificate authority: key material, X.509-SVID and
//! JWT-SVID minting and verification, and trust bundles.

mod authority;
mod bundle;
mod jwt;
mod keys;
mod x509;

pub use authority::{create_authority, Authority, AuthorityConfig, IssuedCert, X509Svid};
pub use bundle::{deserialize_bundle, serialize_bundle, BundleError, JwtKey, TrustBundle};
pub use jwt::{verify_jwt_svid, JwtClaims, JwtError, JwtHeader, JwtSvid};
pub use keys::{key_id, parse_spki, verify_raw, KeyAlgorithm, KeyPair};
pub use x509::{peek_spiffe_id, verify_x509_svid, verify_x509_svid_in, SvidError};

use thiserror::Error;

/// Tolerance applied to both validity bounds of every SVID.
pub const CLOCK_SKEW_SECONDS: i64 = 30;
/// Hard upper bound on configurable X.509-SVID lifetimes.
pub const X509_TTL_CAP: i64 = 86_400;
/// Hard upper bound on configurable JWT-SVID lifetimes.
pub const JWT_TTL_CAP: i64 = 3_600;
/// Root certificate lifetime.
pub const ROOT_LIFETIME_SECONDS: i64 = 10 * 365 * 86_400;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum IssueError {
    #[error("unsupported key algorithm")]
    UnsupportedAlgorithm,
    #[error("key generation failed")]
    KeyGeneration,
    #[error("invalid private key")]
    BadKey,
    #[error("SPIFFE ID belongs to a foreign trust domain")]
    ForeignTrustDomain,
    #[error("TTL outside the allowed range")]
    TtlOutOfRange,
    #[error("audience list is empty")]
    EmptyAudience,
    #[error("authority configuration invalid")]
    BadConfig,
    #[error("certificate generation failed")]
    Certificate,
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn encode(bytes: &[u8]) -> String {
        STANDARD.encode(bytes)
    }

    pub fn decode(s: &str) -> Option<Vec<u8>> {
        STANDARD.decode(s).ok()
    }

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        decode(&s).ok_or_else(|| serde::de::Error::custom("invalid base64"))
    }

    pub mod vec {
        use super::*;
        use serde::ser::SerializeSeq;

        pub fn serialize<S: Serializer>(items: &[Vec<u8>], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(items.len()))?;
            for item in items {
                seq.serialize_element(&encode(item))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<u8>>, D::Error> {
            Vec::<String>::deserialize(d)?
                .iter()
                .map(|s| decode(s).ok_or_else(|| serde::de::Error::custom("invalid base64")))
                .collect()
        }
    }
}
