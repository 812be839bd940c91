use serde::{Deserialize, Serialize};

/// Actor recorded when no identity was established.
pub const UNATTESTED: &str = "unattested";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    NodeAttest,
    WorkloadAttest,
    SvidMinted,
    JwtMinted,
    StsExchange,
    PolicyDecision,
    Handshake,
    Federation,
    Denial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Allow,
    Deny,
    Error,
}

/// One audit event. Carries identities, names and error codes only: never
/// keys, certificates, tokens, credentials or workload metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    pub seq: u64,
    pub timestamp: i64,
    pub actor: String,
    pub kind: AuditKind,
    pub action: String,
    pub resource: String,
    pub outcome: Outcome,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    /// Granted access decisions: policy decisions and handshakes.
    pub allowed: u64,
    /// Denial records.
    pub denied: u64,
    /// Steps that failed for reasons other than authorization.
    pub errors: u64,
}

impl Summary {
    pub fn of(records: &[AuditRecord]) -> Self {
        let mut s = Summary::default();
        for r in records {
            match (r.kind, r.outcome) {
                (AuditKind::Denial, _) => s.denied += 1,
                (_, Outcome::Error) => s.errors += 1,
                (AuditKind::PolicyDecision | AuditKind::Handshake, Outcome::Allow) => {
                    s.allowed += 1
                }
                _ => {}
            }
        }
        s
    }
}

#[derive(Debug, Default)]
pub(super) struct AuditLog {
    records: Vec<AuditRecord>,
}

impl AuditLog {
    #[allow(clippy::too_many_arguments)]
    pub(super) fn push(
        &mut self,
        timestamp: i64,
        actor: impl Into<String>,
        kind: AuditKind,
        action: impl Into<String>,
        resource: impl Into<String>,
        outcome: Outcome,
        detail: impl Into<String>,
    ) {
        let seq = self.records.len() as u64 + 1;
        self.records.push(AuditRecord {
            seq,
            timestamp,
            actor: actor.into(),
            kind,
            action: action.into(),
            resource: resource.into(),
            outcome,
            detail: detail.into(),
        });
    }

    /// A denial: the attempted action was refused with `code`.
    pub(super) fn deny(
        &mut self,
        timestamp: i64,
        actor: impl Into<String>,
        action: impl Into<String>,
        resource: impl Into<String>,
        code: impl Into<String>,
    ) {
        self.push(
            timestamp,
            actor,
            AuditKind::Denial,
            action,
            resource,
            Outcome::Deny,
            code,
        );
    }

    pub(super) fn into_records(self) -> Vec<AuditRecord> {
        self.records
    }
}

/// JSON lines, one record per line, trailing newline.
pub fn to_jsonl(records: &[AuditRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<AuditRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
