//! Compact-serialized JWT-SVIDs.

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::bundle::TrustBundle;
use super::keys::{verify_raw, KeyAlgorithm, KeyPair};
use super::{parse_spki, CLOCK_SKEW_SECONDS};
use crate::id::SpiffeId;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JwtError {
    #[error("signature does not verify")]
    BadSignature,
    #[error("token expired")]
    Expired,
    #[error("token not yet valid")]
    NotYetValid,
    #[error("expected audience not present")]
    AudienceMismatch,
    #[error("issuer does not match the bundle's trust domain")]
    IssuerMismatch,
    #[error("no bundle key with this kid")]
    UnknownKid,
    #[error("malformed token")]
    MalformedToken,
}

impl JwtError {
    pub fn code(self) -> &'static str {
        match self {
            JwtError::BadSignature => "BadSignature",
            JwtError::Expired => "Expired",
            JwtError::NotYetValid => "NotYetValid",
            JwtError::AudienceMismatch => "AudienceMismatch",
            JwtError::IssuerMismatch => "IssuerMismatch",
            JwtError::UnknownKid => "UnknownKid",
            JwtError::MalformedToken => "MalformedToken",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JwtHeader {
    pub alg: String,
    pub kid: String,
    pub typ: String,
}

/// The claim set. Exactly these five claims are emitted and accepted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JwtClaims {
    #[serde(serialize_with = "ser_aud", deserialize_with = "de_aud")]
    pub aud: Vec<String>,
    pub sub: String,
    pub exp: i64,
    pub iat: i64,
    pub iss: String,
}

fn ser_aud<S: Serializer>(aud: &[String], s: S) -> Result<S::Ok, S::Error> {
    match aud {
        [one] => s.serialize_str(one),
        many => many.serialize(s),
    }
}

fn de_aud<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Aud {
        One(String),
        Many(Vec<String>),
    }
    Ok(match Aud::deserialize(d)? {
        Aud::One(a) => vec![a],
        Aud::Many(v) => v,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JwtSvid {
    pub claims: JwtClaims,
    pub kid: String,
    pub token: String,
}

impl JwtSvid {
    pub fn spiffe_id(&self) -> Option<SpiffeId> {
        SpiffeId::parse(&self.claims.sub).ok()
    }
}

pub(crate) fn sign(key: &KeyPair, kid: &str, claims: JwtClaims) -> JwtSvid {
    let header = JwtHeader {
        alg: key.algorithm().jws_name().to_owned(),
        kid: kid.to_owned(),
        typ: "JWT".to_owned(),
    };
    let h = URL_SAFE_NO_PAD.encode(serde_json::to_vec(&header).expect("header serializes"));
    let p = URL_SAFE_NO_PAD.encode(serde_json::to_vec(&claims).expect("claims serialize"));
    let signing_input = format!("{h}.{p}");
    let sig = URL_SAFE_NO_PAD.encode(key.sign(signing_input.as_bytes()));
    JwtSvid {
        claims,
        kid: kid.to_owned(),
        token: format!("{signing_input}.{sig}"),
    }
}

fn b64(part: &str) -> Result<Vec<u8>, JwtError> {
    URL_SAFE_NO_PAD
        .decode(part)
        .map_err(|_| JwtError::MalformedToken)
}

/// Decodes header and claims without checking the signature.
#[cfg(test)]
pub(crate) fn decode_unverified(token: &str) -> Result<(JwtHeader, JwtClaims), JwtError> {
    let mut parts = token.split('.');
    let (Some(h), Some(p), Some(_), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(JwtError::MalformedToken);
    };
    let header = serde_json::from_slice(&b64(h)?).map_err(|_| JwtError::MalformedToken)?;
    let claims = serde_json::from_slice(&b64(p)?).map_err(|_| JwtError::MalformedToken)?;
    Ok((header, claims))
}

/// Verifies a JWT-SVID against a trust bundle.
///
/// Accepts iff the signature verifies under the bundle key named by `kid`,
/// the issuer names the bundle's trust domain, `iat - skew <= now < exp + skew`,
/// and `expected_audience` is one of the audiences.
pub fn verify_jwt_svid(
    token: &str,
    bundle: &TrustBundle,
    expected_audience: &str,
    now: i64,
) -> Result<JwtClaims, JwtError> {
    let parts: Vec<&str> = token.split('.').collect();
    let [h, p, s] = parts.as_slice() else {
        return Err(JwtError::MalformedToken);
    };
    let header: JwtHeader =
        serde_json::from_slice(&b64(h)?).map_err(|_| JwtError::MalformedToken)?;
    let sig = b64(s)?;

    let key = bundle.jwt_key(&header.kid).ok_or(JwtError::UnknownKid)?;
    if KeyAlgorithm::from_jws_name(&header.alg) != Some(key.alg) {
        return Err(JwtError::BadSignature);
    }
    let (alg, raw) = parse_spki(&key.spki).ok_or(JwtError::BadSignature)?;
    let signing_input = &token[..h.len() + 1 + p.len()];
    if !verify_raw(alg, &raw, signing_input.as_bytes(), &sig) {
        return Err(JwtError::BadSignature);
    }

    let claims: JwtClaims =
        serde_json::from_slice(&b64(p)?).map_err(|_| JwtError::MalformedToken)?;
    SpiffeId::parse(&claims.sub).map_err(|_| JwtError::MalformedToken)?;
    let iss = SpiffeId::parse(&claims.iss).map_err(|_| JwtError::IssuerMismatch)?;
    if !iss.member_of(&bundle.trust_domain) {
        return Err(JwtError::IssuerMismatch);
    }
    if now >= claims.exp + CLOCK_SKEW_SECONDS {
        return Err(JwtError::Expired);
    }
    if now < claims.iat - CLOCK_SKEW_SECONDS {
        return Err(JwtError::NotYetValid);
    }
    if !claims.aud.iter().any(|a| a == expected_audience) {
        return Err(JwtError::AudienceMismatch);
    }
    Ok(claims)
}
