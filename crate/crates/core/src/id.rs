//! SPIFFE IDs, trust domains and ID patterns.
//!
//! The canonical form `spiffe://<trust-domain>/<seg>/<seg>` is the only
//! serialization. Trust domains are lowercased on parse; path segments are
//! case-sensitive. Percent-encoded input is rejected rather than decoded.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

const SCHEME_PREFIX: &str = "spiffe://";

/// Maximum length of a trust-domain name.
pub const MAX_TRUST_DOMAIN_LEN: usize = 255;
/// Maximum length of a canonical SPIFFE ID.
pub const MAX_ID_LEN: usize = 2048;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpiffeIdError {
    #[error("scheme must be spiffe://")]
    WrongScheme,
    #[error("trust domain is empty")]
    EmptyTrustDomain,
    #[error("trust domain must be dot-separated non-empty labels of [a-z0-9-]")]
    BadTrustDomainChar,
    #[error("path segments must be non-empty [a-zA-Z0-9._-] and not '.' or '..'")]
    BadSegment,
    #[error("identifier exceeds length limit")]
    TooLong,
}

impl SpiffeIdError {
    pub fn code(self) -> &'static str {
        match self {
            SpiffeIdError::WrongScheme => "WrongScheme",
            SpiffeIdError::EmptyTrustDomain => "EmptyTrustDomain",
            SpiffeIdError::BadTrustDomainChar => "BadTrustDomainChar",
            SpiffeIdError::BadSegment => "BadSegment",
            SpiffeIdError::TooLong => "TooLong",
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum PatternError {
    #[error(transparent)]
    Id(#[from] SpiffeIdError),
    #[error("'**' may only appear as the final path element")]
    MisplacedGlob,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrustDomain(String);

impl TrustDomain {
    pub fn new(name: &str) -> Result<Self, SpiffeIdError> {
        if name.is_empty() {
            return Err(SpiffeIdError::EmptyTrustDomain);
        }
        if name.len() > MAX_TRUST_DOMAIN_LEN {
            return Err(SpiffeIdError::TooLong);
        }
        let lowered = name.to_ascii_lowercase();
        let chars_ok = lowered
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'.' || b == b'-');
        if !chars_ok || lowered.split('.').any(str::is_empty) {
            return Err(SpiffeIdError::BadTrustDomainChar);
        }
        Ok(TrustDomain(lowered))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The identity naming the trust domain itself (`spiffe://<td>`).
    pub fn id(&self) -> SpiffeId {
        SpiffeId {
            trust_domain: self.clone(),
            segments: Vec::new(),
        }
    }
}

impl fmt::Display for TrustDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for TrustDomain {
    type Err = SpiffeIdError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrustDomain::new(s)
    }
}

/// A validated SPIFFE ID.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpiffeId {
    trust_domain: TrustDomain,
    segments: Vec<String>,
}

pub(crate) fn valid_segment(seg: &str) -> bool {
    !seg.is_empty()
        && seg != "."
        && seg != ".."
        && seg
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'.' || b == b'_' || b == b'-')
}

/// Splits `spiffe://rest` into (trust-domain text, path text without leading slash).
fn split_uri(input: &str) -> Result<(&str, Option<&str>), SpiffeIdError> {
    if input.len() > MAX_ID_LEN {
        return Err(SpiffeIdError::TooLong);
    }
    let has_scheme = input
        .get(..SCHEME_PREFIX.len())
        .is_some_and(|p| p.eq_ignore_ascii_case(SCHEME_PREFIX));
    if !has_scheme {
        return Err(SpiffeIdError::WrongScheme);
    }
    let rest = &input[SCHEME_PREFIX.len()..];
    Ok(match rest.find('/') {
        Some(i) => (&rest[..i], Some(&rest[i + 1..])),
        None => (rest, None),
    })
}

impl SpiffeId {
    pub fn parse(input: &str) -> Result<Self, SpiffeIdError> {
        let (td, path) = split_uri(input)?;
        let trust_domain = TrustDomain::new(td)?;
        let segments = match path {
            None => Vec::new(),
            Some(p) => p
                .split('/')
                .map(|s| {
                    if valid_segment(s) {
                        Ok(s.to_owned())
                    } else {
                        Err(SpiffeIdError::BadSegment)
                    }
                })
                .collect::<Result<Vec<_>, _>>()?,
        };
        Ok(SpiffeId {
            trust_domain,
            segments,
        })
    }

    pub fn from_segments<S: AsRef<str>>(
        trust_domain: TrustDomain,
        segments: &[S],
    ) -> Result<Self, SpiffeIdError> {
        let segments = segments
            .iter()
            .map(|s| {
                let s = s.as_ref();
                if valid_segment(s) {
                    Ok(s.to_owned())
                } else {
                    Err(SpiffeIdError::BadSegment)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let id = SpiffeId {
            trust_domain,
            segments,
        };
        if id.to_string().len() > MAX_ID_LEN {
            return Err(SpiffeIdError::TooLong);
        }
        Ok(id)
    }

    pub fn trust_domain(&self) -> &TrustDomain {
        &self.trust_domain
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    /// `/a/b` form of the path, empty for the trust-domain identity.
    pub fn path(&self) -> String {
        self.segments.iter().map(|s| format!("/{s}")).collect()
    }

    pub fn member_of(&self, td: &TrustDomain) -> bool {
        &self.trust_domain == td
    }
}

impl fmt::Display for SpiffeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{SCHEME_PREFIX}{}", self.trust_domain)?;
        for seg in &self.segments {
            write!(f, "/{seg}")?;
        }
        Ok(())
    }
}

impl FromStr for SpiffeId {
    type Err = SpiffeIdError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SpiffeId::parse(s)
    }
}

impl Serialize for SpiffeId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SpiffeId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        SpiffeId::parse(&s).map_err(serde::de::Error::custom)
    }
}

impl Serialize for TrustDomain {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for TrustDomain {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        TrustDomain::new(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SegmentPattern {
    Literal(String),
    /// `*`: exactly one segment.
    Any,
    /// `**`: zero or more trailing segments.
    Rest,
}

/// Pattern over SPIFFE IDs, e.g. `spiffe://*/ci/*/release-runner` or
/// `spiffe://platform.example.org/ci/team-a/**`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpiffeIdPattern {
    /// `None` matches any trust domain.
    trust_domain: Option<TrustDomain>,
    segments: Vec<SegmentPattern>,
}

impl SpiffeIdPattern {
    pub fn parse(input: &str) -> Result<Self, PatternError> {
        let (td, path) = split_uri(input)?;
        let trust_domain = if td == "*" {
            None
        } else {
            Some(TrustDomain::new(td)?)
        };
        let mut segments = Vec::new();
        if let Some(path) = path {
            let parts: Vec<&str> = path.split('/').collect();
            for (i, part) in parts.iter().enumerate() {
                let seg = match *part {
                    "**" if i + 1 == parts.len() => SegmentPattern::Rest,
                    "**" => return Err(PatternError::MisplacedGlob),
                    "*" => SegmentPattern::Any,
                    lit if valid_segment(lit) => SegmentPattern::Literal(lit.to_owned()),
                    _ => return Err(SpiffeIdError::BadSegment.into()),
                };
                segments.push(seg);
            }
        }
        Ok(SpiffeIdPattern {
            trust_domain,
            segments,
        })
    }

    /// Pattern matching exactly one ID.
    pub fn exact(id: &SpiffeId) -> Self {
        SpiffeIdPattern {
            trust_domain: Some(id.trust_domain.clone()),
            segments: id
                .segments
                .iter()
                .cloned()
                .map(SegmentPattern::Literal)
                .collect(),
        }
    }

    pub fn trust_domain(&self) -> Option<&TrustDomain> {
        self.trust_domain.as_ref()
    }

    pub fn segments(&self) -> &[SegmentPattern] {
        &self.segments
    }

    pub fn matches(&self, id: &SpiffeId) -> bool {
        if let Some(td) = &self.trust_domain {
            if td != &id.trust_domain {
                return false;
            }
        }
        let mut rest = id.segments.iter();
        for pat in &self.segments {
            match pat {
                SegmentPattern::Rest => return true,
                SegmentPattern::Any => {
                    if rest.next().is_none() {
                        return false;
                    }
                }
                SegmentPattern::Literal(lit) => {
                    if rest.next() != Some(lit) {
                        return false;
                    }
                }
            }
        }
        rest.next().is_none()
    }
}

impl fmt::Display for SpiffeIdPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(SCHEME_PREFIX)?;
        match &self.trust_domain {
            Some(td) => write!(f, "{td}")?,
            None => f.write_str("*")?,
        }
        for seg in &self.segments {
            match seg {
                SegmentPattern::Literal(s) => write!(f, "/{s}")?,
                SegmentPattern::Any => f.write_str("/*")?,
                SegmentPattern::Rest => f.write_str("/**")?,
            }
        }
        Ok(())
    }
}

impl FromStr for SpiffeIdPattern {
    type Err = PatternError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SpiffeIdPattern::parse(s)
    }
}

pub fn parse_spiffe_id(input: &str) -> Result<SpiffeId, SpiffeIdError> {
    SpiffeId::parse(input)
}

pub fn canonical_string(id: &SpiffeId) -> String {
    id.to_string()
}

pub fn match_pattern(pattern: &SpiffeIdPattern, id: &SpiffeId) -> bool {
    pattern.matches(id)
}
