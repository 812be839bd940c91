use std::fmt;
use std::str::FromStr;

use ring::rand::SystemRandom;
use ring::signature::{
    self, EcdsaKeyPair, Ed25519KeyPair, KeyPair as _, UnparsedPublicKey,
    ECDSA_P256_SHA256_FIXED_SIGNING,
};
use rustls::pki_types::PrivatePkcs8KeyDer;
use serde::{Deserialize, Serialize};

use super::IssueError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KeyAlgorithm {
    #[default]
    Ed25519,
    EcdsaP256,
}

impl KeyAlgorithm {
    /// JOSE `alg` header value.
    pub fn jws_name(self) -> &'static str {
        match self {
            KeyAlgorithm::Ed25519 => "EdDSA",
            KeyAlgorithm::EcdsaP256 => "ES256",
        }
    }

    pub fn from_jws_name(name: &str) -> Option<Self> {
        match name {
            "EdDSA" => Some(KeyAlgorithm::Ed25519),
            "ES256" => Some(KeyAlgorithm::EcdsaP256),
            _ => None,
        }
    }

    fn public_key_len(self) -> usize {
        match self {
            KeyAlgorithm::Ed25519 => 32,
            KeyAlgorithm::EcdsaP256 => 65,
        }
    }

    pub(crate) fn rcgen_alg(self) -> &'static rcgen::SignatureAlgorithm {
        match self {
            KeyAlgorithm::Ed25519 => &rcgen::PKCS_ED25519,
            KeyAlgorithm::EcdsaP256 => &rcgen::PKCS_ECDSA_P256_SHA256,
        }
    }

    pub(crate) fn verification(self) -> &'static dyn signature::VerificationAlgorithm {
        match self {
            KeyAlgorithm::Ed25519 => &signature::ED25519,
            KeyAlgorithm::EcdsaP256 => &signature::ECDSA_P256_SHA256_FIXED,
        }
    }
}

impl fmt::Display for KeyAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyAlgorithm::Ed25519 => "ed25519",
            KeyAlgorithm::EcdsaP256 => "ecdsa-p256",
        })
    }
}

impl FromStr for KeyAlgorithm {
    type Err = IssueError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ed25519" | "eddsa" => Ok(KeyAlgorithm::Ed25519),
            "ecdsa-p256" | "p256" | "es256" => Ok(KeyAlgorithm::EcdsaP256),
            _ => Err(IssueError::UnsupportedAlgorithm),
        }
    }
}

enum Signer {
    Ed(Ed25519KeyPair),
    Ec(EcdsaKeyPair),
}

/// A signing key held as PKCS#8 together with its public halves.
pub struct KeyPair {
    algorithm: KeyAlgorithm,
    pkcs8: Vec<u8>,
    public_key: Vec<u8>,
    spki: Vec<u8>,
    signer: Signer,
}

impl KeyPair {
    pub fn generate(algorithm: KeyAlgorithm) -> Result<Self, IssueError> {
        let rng = SystemRandom::new();
        let doc = match algorithm {
            KeyAlgorithm::Ed25519 => Ed25519KeyPair::generate_pkcs8(&rng),
            KeyAlgorithm::EcdsaP256 => {
                EcdsaKeyPair::generate_pkcs8(&ECDSA_P256_SHA256_FIXED_SIGNING, &rng)
            }
        }
        .map_err(|_| IssueError::KeyGeneration)?;
        Self::from_pkcs8(algorithm, doc.as_ref())
    }

    pub fn from_pkcs8(algorithm: KeyAlgorithm, pkcs8: &[u8]) -> Result<Self, IssueError> {
        let signer = match algorithm {
            KeyAlgorithm::Ed25519 => Signer::Ed(
                Ed25519KeyPair::from_pkcs8_maybe_unchecked(pkcs8)
                    .map_err(|_| IssueError::BadKey)?,
            ),
            KeyAlgorithm::EcdsaP256 => Signer::Ec(
                EcdsaKeyPair::from_pkcs8(
                    &ECDSA_P256_SHA256_FIXED_SIGNING,
                    pkcs8,
                    &SystemRandom::new(),
                )
                .map_err(|_| IssueError::BadKey)?,
            ),
        };
        let public_key = match &signer {
            Signer::Ed(k) => k.public_key().as_ref().to_vec(),
            Signer::Ec(k) => k.public_key().as_ref().to_vec(),
        };
        if public_key.len() != algorithm.public_key_len() {
            return Err(IssueError::BadKey);
        }
        let spki = rcgen_key(algorithm, pkcs8)?.public_key_der();
        Ok(KeyPair {
            algorithm,
            pkcs8: pkcs8.to_vec(),
            public_key,
            spki,
            signer,
        })
    }

    pub fn algorithm(&self) -> KeyAlgorithm {
        self.algorithm
    }

    pub fn public_key(&self) -> &[u8] {
        &self.public_key
    }

    /// DER SubjectPublicKeyInfo.
    pub fn spki(&self) -> &[u8] {
        &self.spki
    }

    pub fn pkcs8(&self) -> &[u8] {
        &self.pkcs8
    }

    /// Raw JWS signature (Ed25519, or fixed-width r||s for P-256).
    pub fn sign(&self, msg: &[u8]) -> Vec<u8> {
        match &self.signer {
            Signer::Ed(k) => k.sign(msg).as_ref().to_vec(),
            Signer::Ec(k) => k
                .sign(&SystemRandom::new(), msg)
                .expect("P-256 signing with system rng")
                .as_ref()
                .to_vec(),
        }
    }

    pub(crate) fn to_rcgen(&self) -> Result<rcgen::KeyPair, IssueError> {
        rcgen_key(self.algorithm, &self.pkcs8)
    }
}

fn rcgen_key(algorithm: KeyAlgorithm, pkcs8: &[u8]) -> Result<rcgen::KeyPair, IssueError> {
    let der = PrivatePkcs8KeyDer::from(pkcs8.to_vec());
    rcgen::KeyPair::from_pkcs8_der_and_sign_algo(&der, algorithm.rcgen_alg())
        .map_err(|_| IssueError::BadKey)
}

impl Clone for KeyPair {
    fn clone(&self) -> Self {
        KeyPair::from_pkcs8(self.algorithm, &self.pkcs8).expect("key was valid at construction")
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("algorithm", &self.algorithm)
            .field("kid", &key_id(&self.spki))
            .finish_non_exhaustive()
    }
}

impl PartialEq for KeyPair {
    fn eq(&self, other: &Self) -> bool {
        self.algorithm == other.algorithm && self.pkcs8 == other.pkcs8
    }
}

/// Verifies a raw JWS signature against a raw public key.
pub fn verify_raw(algorithm: KeyAlgorithm, public_key: &[u8], msg: &[u8], sig: &[u8]) -> bool {
    UnparsedPublicKey::new(algorithm.verification(), public_key)
        .verify(msg, sig)
        .is_ok()
}

/// Key identifier: first 16 hex characters of SHA-256 over the SPKI.
pub fn key_id(spki: &[u8]) -> String {
    let digest = ring::digest::digest(&ring::digest::SHA256, spki);
    digest.as_ref()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Extracts (algorithm, raw public key) from a DER SPKI.
pub fn parse_spki(spki: &[u8]) -> Option<(KeyAlgorithm, Vec<u8>)> {
    use x509_parser::oid_registry::{OID_KEY_TYPE_EC_PUBLIC_KEY, OID_SIG_ED25519};
    use x509_parser::prelude::FromDer;
    use x509_parser::x509::SubjectPublicKeyInfo;

    let (rest, info) = SubjectPublicKeyInfo::from_der(spki).ok()?;
    if !rest.is_empty() {
        return None;
    }
    let oid = &info.algorithm.algorithm;
    let algorithm = if *oid == OID_SIG_ED25519 {
        KeyAlgorithm::Ed25519
    } else if *oid == OID_KEY_TYPE_EC_PUBLIC_KEY {
        KeyAlgorithm::EcdsaP256
    } else {
        return None;
    };
    let raw = info.subject_public_key.data.to_vec();
    (raw.len() == algorithm.public_key_len()).then_some((algorithm, raw))
}
