use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::b64;
use super::keys::{parse_spki, KeyAlgorithm};
use crate::id::TrustDomain;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum BundleError {
    #[error("malformed bundle document")]
    MalformedBundle,
    #[error("bundle has no X.509 roots")]
    EmptyRoots,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JwtKey {
    pub kid: String,
    pub alg: KeyAlgorithm,
    /// DER SubjectPublicKeyInfo.
    pub spki: Vec<u8>,
}

/// Root key material for one trust domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustBundle {
    pub trust_domain: TrustDomain,
    pub x509_roots: Vec<Vec<u8>>,
    pub jwt_keys: Vec<JwtKey>,
    pub sequence: u64,
    pub refresh_hint: u64,
}

impl TrustBundle {
    pub fn jwt_key(&self, kid: &str) -> Option<&JwtKey> {
        self.jwt_keys.iter().find(|k| k.kid == kid)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(BundleDoc::from(self)).expect("bundle document serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, BundleError> {
        let doc: BundleDoc =
            serde_json::from_value(value).map_err(|_| BundleError::MalformedBundle)?;
        doc.try_into()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleDoc {
    trust_domain: String,
    sequence: u64,
    refresh_hint: u64,
    #[serde(with = "b64::vec")]
    x509_roots: Vec<Vec<u8>>,
    jwt_keys: Vec<JwtKeyDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JwtKeyDoc {
    kid: String,
    alg: String,
    #[serde(with = "b64")]
    key: Vec<u8>,
}

impl From<&TrustBundle> for BundleDoc {
    fn from(b: &TrustBundle) -> Self {
        BundleDoc {
            trust_domain: b.trust_domain.to_string(),
            sequence: b.sequence,
            refresh_hint: b.refresh_hint,
            x509_roots: b.x509_roots.clone(),
            jwt_keys: b
                .jwt_keys
                .iter()
                .map(|k| JwtKeyDoc {
                    kid: k.kid.clone(),
                    alg: k.alg.jws_name().to_owned(),
                    key: k.spki.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<BundleDoc> for TrustBundle {
    type Error = BundleError;

    fn try_from(doc: BundleDoc) -> Result<Self, Self::Error> {
        use x509_parser::prelude::{FromDer, X509Certificate};

        let trust_domain =
            TrustDomain::new(&doc.trust_domain).map_err(|_| BundleError::MalformedBundle)?;
        if doc.x509_roots.is_empty() {
            return Err(BundleError::EmptyRoots);
        }
        for root in &doc.x509_roots {
            match X509Certificate::from_der(root) {
                Ok(([], _)) => {}
                _ => return Err(BundleError::MalformedBundle),
            }
        }
        let mut kids = BTreeSet::new();
        let mut jwt_keys = Vec::with_capacity(doc.jwt_keys.len());
        for k in doc.jwt_keys {
            let alg = KeyAlgorithm::from_jws_name(&k.alg).ok_or(BundleError::MalformedBundle)?;
            match parse_spki(&k.key) {
                Some((parsed, _)) if parsed == alg => {}
                _ => return Err(BundleError::MalformedBundle),
            }
            if k.kid.is_empty() || !kids.insert(k.kid.clone()) {
                return Err(BundleError::MalformedBundle);
            }
            jwt_keys.push(JwtKey {
                kid: k.kid,
                alg,
                spki: k.key,
            });
        }
        Ok(TrustBundle {
            trust_domain,
            x509_roots: doc.x509_roots,
            jwt_keys,
            sequence: doc.sequence,
            refresh_hint: doc.refresh_hint,
        })
    }
}

pub fn serialize_bundle(bundle: &TrustBundle) -> Vec<u8> {
    serde_json::to_vec(&BundleDoc::from(bundle)).expect("bundle document serializes")
}

pub fn deserialize_bundle(bytes: &[u8]) -> Result<TrustBundle, BundleError> {
    let doc: BundleDoc = serde_json::from_slice(bytes).map_err(|_| BundleError::MalformedBundle)?;
    doc.try_into()
}

impl Serialize for TrustBundle {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        BundleDoc::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for TrustBundle {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        BundleDoc::deserialize(d)?
            .try_into()
            .map_err(serde::de::Error::custom)
    }
}
