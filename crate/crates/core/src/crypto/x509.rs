use thiserror::Error;
use x509_parser::certificate::X509Certificate;
use x509_parser::extensions::GeneralName;
use x509_parser::prelude::FromDer;

use super::bundle::TrustBundle;
use super::CLOCK_SKEW_SECONDS;
use crate::id::SpiffeId;

const MAX_CHAIN_DEPTH: usize = 8;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SvidError {
    #[error("certificate expired")]
    Expired,
    #[error("certificate not yet valid")]
    NotYetValid,
    #[error("certificate does not chain to a trusted root")]
    UnknownRoot,
    #[error("leaf has no URI SAN")]
    NoUriSan,
    #[error("leaf has more than one URI SAN")]
    MultipleUriSan,
    #[error("leaf is a CA certificate")]
    LeafIsCa,
    #[error("certificate could not be parsed")]
    Malformed,
}

impl SvidError {
    pub fn code(self) -> &'static str {
        match self {
            SvidError::Expired => "Expired",
            SvidError::NotYetValid => "NotYetValid",
            SvidError::UnknownRoot => "UnknownRoot",
            SvidError::NoUriSan => "NoUriSan",
            SvidError::MultipleUriSan => "MultipleUriSan",
            SvidError::LeafIsCa => "LeafIsCa",
            SvidError::Malformed => "Malformed",
        }
    }
}

fn parse(der: &[u8]) -> Result<X509Certificate<'_>, SvidError> {
    match X509Certificate::from_der(der) {
        Ok(([], cert)) => Ok(cert),
        _ => Err(SvidError::Malformed),
    }
}

fn is_ca(cert: &X509Certificate<'_>) -> Result<bool, SvidError> {
    Ok(cert
        .basic_constraints()
        .map_err(|_| SvidError::Malformed)?
        .is_some_and(|bc| bc.value.ca))
}

fn uri_san(cert: &X509Certificate<'_>) -> Result<SpiffeId, SvidError> {
    let san = cert
        .subject_alternative_name()
        .map_err(|_| SvidError::Malformed)?;
    let uris: Vec<&str> = san
        .map(|ext| {
            ext.value
                .general_names
                .iter()
                .filter_map(|n| match n {
                    GeneralName::URI(u) => Some(*u),
                    _ => None,
                })
                .collect()
        })
        .unwrap_or_default();
    match uris.as_slice() {
        [] => Err(SvidError::NoUriSan),
        [one] => SpiffeId::parse(one).map_err(|_| SvidError::NoUriSan),
        _ => Err(SvidError::MultipleUriSan),
    }
}

fn check_time(cert: &X509Certificate<'_>, now: i64) -> Result<(), SvidError> {
    let v = cert.validity();
    if now < v.not_before.timestamp() - CLOCK_SKEW_SECONDS {
        return Err(SvidError::NotYetValid);
    }
    if now > v.not_after.timestamp() + CLOCK_SKEW_SECONDS {
        return Err(SvidError::Expired);
    }
    Ok(())
}

fn signed_by(child: &X509Certificate<'_>, issuer: &X509Certificate<'_>) -> bool {
    child.issuer().as_raw() == issuer.subject().as_raw()
        && child.verify_signature(Some(issuer.public_key())).is_ok()
}

/// Reads the SPIFFE ID from a leaf's URI SAN without verifying anything else.
pub fn peek_spiffe_id(leaf: &[u8]) -> Result<SpiffeId, SvidError> {
    uri_san(&parse(leaf)?)
}

/// Verifies an X.509-SVID against the bundle of the leaf's trust domain.
///
/// The leaf must carry exactly one URI SAN, must not be a CA, must chain
/// (through any supplied intermediates) to one of the bundle's roots, and
/// every certificate on the path must be valid at `now` within the skew.
pub fn verify_x509_svid(
    leaf: &[u8],
    intermediates: &[Vec<u8>],
    bundle: &TrustBundle,
    now: i64,
) -> Result<SpiffeId, SvidError> {
    verify_x509_svid_in(leaf, intermediates, std::iter::once(bundle), now)
}

/// Like [`verify_x509_svid`], selecting the bundle for the leaf's trust
/// domain from a set (own domain plus federated domains).
pub fn verify_x509_svid_in<'a>(
    leaf: &[u8],
    intermediates: &[Vec<u8>],
    bundles: impl IntoIterator<Item = &'a TrustBundle>,
    now: i64,
) -> Result<SpiffeId, SvidError> {
    let leaf_cert = parse(leaf)?;
    let id = uri_san(&leaf_cert)?;
    if is_ca(&leaf_cert)? {
        return Err(SvidError::LeafIsCa);
    }
    let bundle = bundles
        .into_iter()
        .find(|b| id.member_of(&b.trust_domain))
        .ok_or(SvidError::UnknownRoot)?;

    let roots = bundle
        .x509_roots
        .iter()
        .filter_map(|der| parse(der).ok())
        .collect::<Vec<_>>();
    let inters = intermediates
        .iter()
        .map(|der| parse(der))
        .collect::<Result<Vec<_>, _>>()?;

    let mut path = vec![&leaf_cert];
    let mut current = &leaf_cert;
    let mut anchored = false;
    for _ in 0..MAX_CHAIN_DEPTH {
        if roots.iter().any(|r| signed_by(current, r)) {
            anchored = true;
            break;
        }
        match inters
            .iter()
            .find(|i| !path.iter().any(|p| std::ptr::eq(*p, *i)) && signed_by(current, i))
        {
            Some(next) if is_ca(next)? => {
                path.push(next);
                current = next;
            }
            _ => break,
        }
    }
    if !anchored {
        return Err(SvidError::UnknownRoot);
    }
    for cert in path {
        check_time(cert, now)?;
    }
    Ok(id)
}
