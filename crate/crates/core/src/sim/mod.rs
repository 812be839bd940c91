//! Deterministic CI/CD scenario runner.
//!
//! A scenario declares trust domains, nodes, registration entries,
//! policies, token-exchange roles and per-job step scripts. Everything runs
//! in one process under a simulated clock; messages between components are
//! still encoded and decoded. Jobs advance in `(ready time, declaration
//! order)` order, so a fixed scenario always produces the same audit log.

mod audit;
mod runtime;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentSettings, WorkloadInfo};
use crate::attestation::{RegistrationEntry, Selector};
use crate::id::{SpiffeId, TrustDomain};
use crate::policy::{parse_policy, Scalar};
use crate::server::ServerSettings;
use crate::sts::StsTrustPolicy;

pub use audit::{from_jsonl, to_jsonl, AuditKind, AuditRecord, Outcome, Summary, UNATTESTED};
pub use runtime::{run_scenario, RunReport, Runtime};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("scenario invalid: {0}")]
    ScenarioInvalid(String),
}

impl SimError {
    pub fn code(&self) -> &'static str {
        "ScenarioInvalid"
    }
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::ScenarioInvalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Default seed; a seed given to the runner takes precedence.
    #[serde(default)]
    pub seed: u64,
    pub start_time: i64,
    pub domains: Vec<DomainDef>,
    /// Policy name to DSL source.
    #[serde(default)]
    pub policies: BTreeMap<String, String>,
    #[serde(default)]
    pub sts_roles: Vec<StsTrustPolicy>,
    pub jobs: Vec<JobDef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainDef {
    pub trust_domain: TrustDomain,
    #[serde(default)]
    pub server: ServerSettings,
    /// Peers whose bundles this domain may fetch. Bootstrap bundles are
    /// exchanged out of band before the run starts.
    #[serde(default)]
    pub federates_with: Vec<FederationDef>,
    pub nodes: Vec<NodeDef>,
    #[serde(default)]
    pub entries: Vec<RegistrationEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationDef {
    pub peer: TrustDomain,
    #[serde(default = "default_refresh")]
    pub refresh_interval_seconds: u64,
}

fn default_refresh() -> u64 {
    300
}

fn default_ttl() -> i64 {
    3600
}

/// A node running one agent. Its node entry and join token are derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDef {
    /// Unique across the scenario.
    pub name: String,
    pub agent_id: SpiffeId,
    pub selectors: Vec<Selector>,
    #[serde(default = "default_ttl")]
    pub ttl: i64,
    #[serde(default)]
    pub agent: AgentSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobDef {
    /// Unique; also the job's Workload API handle.
    pub name: String,
    /// Node whose agent serves this job. Jobs without a node may only
    /// run `federate` and `sleep` steps.
    #[serde(default)]
    pub node: Option<String>,
    #[serde(default)]
    pub workload: WorkloadInfo,
    /// Offset from `start_time` of the first step.
    #[serde(default)]
    pub start_at: i64,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    FetchX509,
    FetchJwt {
        aud: Vec<String>,
    },
    /// Trades the job's latest JWT-SVID for scoped credentials.
    Exchange {
        role: String,
    },
    /// Requests access as the job's current identity.
    Access {
        policy: String,
        action: String,
        resource: String,
        #[serde(default)]
        context: BTreeMap<String, Scalar>,
        /// Also require the job's scoped credentials to grant the access.
        #[serde(default)]
        use_credentials: bool,
    },
    /// Mutual TLS with another job's workload.
    Handshake {
        peer: String,
    },
    /// The job's agent asks the server for `spiffe_id` without attesting.
    RequestSvid {
        spiffe_id: SpiffeId,
    },
    /// `domain` fetches `peer`'s bundle.
    Federate {
        domain: TrustDomain,
        peer: TrustDomain,
    },
    Sleep {
        seconds: i64,
    },
}

impl Step {
    fn needs_node(&self) -> bool {
        !matches!(
            self,
            Step::Federate { .. } | Step::Sleep { .. } | Step::Access { .. }
        )
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let scenario: Scenario =
            serde_json::from_str(text).map_err(|e| invalid(format!("parse: {e}")))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks that every reference resolves. Entry contents are checked
    /// again when registered.
    pub fn validate(&self) -> Result<(), SimError> {
        let mut domains = BTreeSet::new();
        let mut nodes: BTreeMap<&str, &TrustDomain> = BTreeMap::new();
        for d in &self.domains {
            if !domains.insert(&d.trust_domain) {
                return Err(invalid(format!("duplicate domain {}", d.trust_domain)));
            }
            for n in &d.nodes {
                if nodes.insert(&n.name, &d.trust_domain).is_some() {
                    return Err(invalid(format!("duplicate node {}", n.name)));
                }
                if !n.agent_id.member_of(&d.trust_domain) {
                    return Err(invalid(format!(
                        "node {} agent_id outside its domain",
                        n.name
                    )));
                }
                if n.selectors.is_empty() || n.ttl <= 0 {
                    return Err(invalid(format!(
                        "node {} needs selectors and a positive ttl",
                        n.name
                    )));
                }
            }
        }
        if domains.is_empty() {
            return Err(invalid("no domains"));
        }
        for d in &self.domains {
            for f in &d.federates_with {
                if f.peer == d.trust_domain || !domains.contains(&f.peer) {
                    return Err(invalid(format!(
                        "{} cannot federate with {}",
                        d.trust_domain, f.peer
                    )));
                }
            }
        }
        for (name, source) in &self.policies {
            parse_policy(source).map_err(|e| invalid(format!("policy {name}: {e}")))?;
        }
        let mut roles = BTreeSet::new();
        for r in &self.sts_roles {
            if !roles.insert(r.role_name.as_str()) {
                return Err(invalid(format!("duplicate role {}", r.role_name)));
            }
        }

        let jobs: BTreeMap<&str, &JobDef> =
            self.jobs.iter().map(|j| (j.name.as_str(), j)).collect();
        if jobs.len() != self.jobs.len() {
            return Err(invalid("duplicate job name"));
        }
        for job in &self.jobs {
            let ctx = |m: String| invalid(format!("job {}: {m}", job.name));
            if let Some(node) = &job.node {
                if !nodes.contains_key(node.as_str()) {
                    return Err(ctx(format!("unknown node {node}")));
                }
            }
            if job.start_at < 0 {
                return Err(ctx("negative start_at".into()));
            }
            for step in &job.steps {
                if step.needs_node() && job.node.is_none() {
                    return Err(ctx(format!("{step:?} needs a node")));
                }
                match step {
                    Step::Exchange { role } if !roles.contains(role.as_str()) => {
                        return Err(ctx(format!("unknown role {role}")));
                    }
                    Step::Access { policy, .. } if !self.policies.contains_key(policy) => {
                        return Err(ctx(format!("unknown policy {policy}")));
                    }
                    Step::Handshake { peer } => match jobs.get(peer.as_str()) {
                        Some(p) if p.name != job.name && p.node.is_some() => {}
                        _ => return Err(ctx(format!("bad handshake peer {peer}"))),
                    },
                    Step::Federate { domain, peer } => {
                        let def = self.domains.iter().find(|d| &d.trust_domain == domain);
                        if !def.is_some_and(|d| d.federates_with.iter().any(|f| &f.peer == peer)) {
                            return Err(ctx(format!(
                                "{domain} is not configured to federate with {peer}"
                            )));
                        }
                    }
                    Step::Sleep { seconds } if *seconds < 0 => {
                        return Err(ctx("negative sleep".into()));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Trust domain of the node serving `job`.
    pub fn job_domain(&self, job: &JobDef) -> Option<&TrustDomain> {
        let node = job.node.as_deref()?;
        self.domains
            .iter()
            .find(|d| d.nodes.iter().any(|n| n.name == node))
            .map(|d| &d.trust_domain)
    }
}
