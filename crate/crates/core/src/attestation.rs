//! Selectors, registration entries and entry matching.
//!
//! An entry matches when its parent equals the attesting parent and its
//! selector set is a subset of the observed selectors.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::id::SpiffeId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SelectorError {
    #[error("selector must be 'type:value'")]
    MissingSeparator,
    #[error("selector type must match [a-z0-9_]+")]
    BadType,
    #[error("selector value must be non-empty")]
    EmptyValue,
}

/// A typed fact about a node or workload, serialized as `type:value`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Selector {
    kind: String,
    value: String,
}

impl Selector {
    pub fn new(kind: &str, value: &str) -> Result<Self, SelectorError> {
        if kind.is_empty()
            || !kind
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        {
            return Err(SelectorError::BadType);
        }
        if value.is_empty() {
            return Err(SelectorError::EmptyValue);
        }
        Ok(Selector {
            kind: kind.to_owned(),
            value: value.to_owned(),
        })
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn value(&self) -> &str {
        &self.value
    }
}

impl FromStr for Selector {
    type Err = SelectorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, value) = s.split_once(':').ok_or(SelectorError::MissingSeparator)?;
        Selector::new(kind, value)
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.value)
    }
}

impl Serialize for Selector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Selector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

pub type SelectorSet = BTreeSet<Selector>;

/// Parses a list of `type:value` strings.
pub fn selectors<I, S>(items: I) -> Result<SelectorSet, SelectorError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    items.into_iter().map(|s| s.as_ref().parse()).collect()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EntryError {
    #[error("entry_id is empty")]
    EmptyId,
    #[error("entry has no selectors")]
    NoSelectors,
    #[error("ttl must be positive")]
    BadTtl,
    #[error("spiffe_id and parent_id are in different trust domains")]
    CrossDomainParent,
}

/// Binds a selector set under a parent identity to a SPIFFE ID.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationEntry {
    /// Assigned by the server when registered empty.
    #[serde(default)]
    pub entry_id: String,
    pub spiffe_id: SpiffeId,
    pub parent_id: SpiffeId,
    pub selectors: SelectorSet,
    #[serde(rename = "ttl")]
    pub ttl_seconds: i64,
    #[serde(rename = "node", default)]
    pub is_node_entry: bool,
}

impl RegistrationEntry {
    pub fn validate(&self) -> Result<(), EntryError> {
        if self.entry_id.is_empty() {
            return Err(EntryError::EmptyId);
        }
        if self.selectors.is_empty() {
            return Err(EntryError::NoSelectors);
        }
        if self.ttl_seconds <= 0 {
            return Err(EntryError::BadTtl);
        }
        if self.spiffe_id.trust_domain() != self.parent_id.trust_domain() {
            return Err(EntryError::CrossDomainParent);
        }
        Ok(())
    }

    pub fn matches(&self, parent: &SpiffeId, observed: &SelectorSet) -> bool {
        &self.parent_id == parent && self.selectors.is_subset(observed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestedIdentity {
    pub spiffe_id: SpiffeId,
    pub matched_entry_id: String,
    pub observed_selectors: SelectorSet,
    pub attested_at: i64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttestError {
    #[error("no registration entry matches")]
    NoMatch,
    #[error("more than one node entry matches: {0:?}")]
    AmbiguousMatch(Vec<String>),
}

/// Entries whose parent is `parent` and whose selectors are all observed,
/// ordered by `entry_id`.
pub fn match_entries<'a>(
    entries: &'a [RegistrationEntry],
    parent: &SpiffeId,
    observed: &SelectorSet,
) -> Vec<&'a RegistrationEntry> {
    let mut out: Vec<_> = entries
        .iter()
        .filter(|e| e.matches(parent, observed))
        .collect();
    out.sort_by(|a, b| a.entry_id.cmp(&b.entry_id));
    out
}

/// Node attestation: exactly one node entry under the server identity must
/// match. Ambiguity is refused.
pub fn attest_node(
    entries: &[RegistrationEntry],
    server_id: &SpiffeId,
    node_selectors: &SelectorSet,
    now: i64,
) -> Result<AttestedIdentity, AttestError> {
    let matched: Vec<_> = match_entries(entries, server_id, node_selectors)
        .into_iter()
        .filter(|e| e.is_node_entry)
        .collect();
    match matched.as_slice() {
        [] => Err(AttestError::NoMatch),
        [entry] => Ok(AttestedIdentity {
            spiffe_id: entry.spiffe_id.clone(),
            matched_entry_id: entry.entry_id.clone(),
            observed_selectors: node_selectors.clone(),
            attested_at: now,
        }),
        many => Err(AttestError::AmbiguousMatch(
            many.iter().map(|e| e.entry_id.clone()).collect(),
        )),
    }
}

/// Workload attestation: one identity per matching workload entry. An empty
/// result means the workload gets nothing.
pub fn attest_workload(
    entries: &[RegistrationEntry],
    agent_id: &SpiffeId,
    workload_selectors: &SelectorSet,
    now: i64,
) -> Vec<AttestedIdentity> {
    match_entries(entries, agent_id, workload_selectors)
        .into_iter()
        .filter(|e| !e.is_node_entry)
        .map(|e| AttestedIdentity {
            spiffe_id: e.spiffe_id.clone(),
            matched_entry_id: e.entry_id.clone(),
            observed_selectors: workload_selectors.clone(),
            attested_at: now,
        })
        .collect()
}
