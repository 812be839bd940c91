use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::audit::{AuditKind, AuditLog, AuditRecord, Outcome, Summary, UNATTESTED};
use super::{invalid, JobDef, Scenario, SimError, Step};
use crate::agent::{Agent, AgentError, LocalLink, Rotation, X509Response};
use crate::attestation::RegistrationEntry;
use crate::clock::{Clock, SimClock};
use crate::crypto::JwtSvid;
use crate::id::{SpiffeId, TrustDomain};
use crate::policy::{evaluate, parse_policy, AccessRequest, PolicySet};
use crate::server::{FederationPeer, LocalTransport, ServerState};
use crate::sts::{Broker, BrokerRequest, ScopedCredentials};
use crate::tls::mutual_handshake;
use crate::wire::Response;

/// Outcome of a full run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub summary: Summary,
    pub finished_at: i64,
    pub audit: Vec<AuditRecord>,
}

impl RunReport {
    pub fn audit_jsonl(&self) -> String {
        super::to_jsonl(&self.audit)
    }
}

/// Validates and runs `scenario`. `seed` overrides the scenario's own.
pub fn run_scenario(scenario: &Scenario, seed: Option<u64>) -> Result<RunReport, SimError> {
    let mut rt = Runtime::new(scenario, seed.unwrap_or(scenario.seed))?;
    rt.run();
    Ok(rt.finish())
}

struct NodeRt {
    name: String,
    agent: Arc<Agent>,
}

#[derive(Default)]
struct JobRt {
    cursor: usize,
    ready_at: i64,
    jwt: Option<JwtSvid>,
    credentials: Option<ScopedCredentials>,
    /// Identity the job acts as: its latest X.509 identity, else its latest JWT subject.
    identity: Option<SpiffeId>,
}

/// In-process control planes, agents and broker driven by a simulated clock.
pub struct Runtime {
    scenario: Scenario,
    seed: u64,
    clock: SimClock,
    servers: BTreeMap<TrustDomain, Arc<ServerState>>,
    nodes: BTreeMap<String, NodeRt>,
    transport: LocalTransport,
    broker: Broker,
    policies: BTreeMap<String, PolicySet>,
    jobs: Vec<JobRt>,
    audit: AuditLog,
}

impl Runtime {
    /// Builds every component at `start_time` and node-attests each agent.
    pub fn new(scenario: &Scenario, seed: u64) -> Result<Self, SimError> {
        scenario.validate()?;
        let now = scenario.start_time;
        let clock = SimClock::new(now);
        let transport = LocalTransport::new();
        let mut servers = BTreeMap::new();
        for d in &scenario.domains {
            let server = ServerState::new(d.trust_domain.clone(), d.server.clone(), now)
                .map_err(|e| invalid(format!("{}: {e}", d.trust_domain)))?;
            let server = Arc::new(server);
            transport.register(d.trust_domain.as_str(), server.clone());
            servers.insert(d.trust_domain.clone(), server);
        }
        for d in &scenario.domains {
            let server = &servers[&d.trust_domain];
            for f in &d.federates_with {
                let bootstrap = servers[&f.peer].bundle();
                FederationPeer::new(
                    f.peer.clone(),
                    f.peer.as_str(),
                    bootstrap,
                    f.refresh_interval_seconds,
                )
                .and_then(|p| server.add_federation_peer(p))
                .map_err(|e| invalid(format!("federation {}: {e}", d.trust_domain)))?;
            }
            for n in &d.nodes {
                let entry = RegistrationEntry {
                    entry_id: String::new(),
                    spiffe_id: n.agent_id.clone(),
                    parent_id: server.server_id().clone(),
                    selectors: n.selectors.iter().cloned().collect(),
                    ttl_seconds: n.ttl,
                    is_node_entry: true,
                };
                server
                    .register_entry(entry)
                    .map_err(|e| invalid(format!("node {}: {e}", n.name)))?;
            }
            for e in &d.entries {
                server
                    .register_entry(e.clone())
                    .map_err(|err| invalid(format!("entry {}: {err}", e.spiffe_id)))?;
            }
        }

        let mut broker = Broker::new(seed);
        for role in &scenario.sts_roles {
            broker.add_role(role.clone());
        }
        let policies = scenario
            .policies
            .iter()
            .map(|(k, src)| {
                Ok((
                    k.clone(),
                    parse_policy(src).map_err(|e| invalid(e.to_string()))?,
                ))
            })
            .collect::<Result<_, SimError>>()?;

        let mut rt = Runtime {
            scenario: scenario.clone(),
            seed,
            clock,
            servers,
            nodes: BTreeMap::new(),
            transport,
            broker,
            policies,
            jobs: Vec::new(),
            audit: AuditLog::default(),
        };
        rt.start_agents()?;
        rt.jobs = scenario
            .jobs
            .iter()
            .map(|j| JobRt {
                ready_at: now + j.start_at,
                ..JobRt::default()
            })
            .collect();
        Ok(rt)
    }

    fn start_agents(&mut self) -> Result<(), SimError> {
        let now = self.clock.now();
        for d in &self.scenario.domains {
            let server = self.servers[&d.trust_domain].clone();
            for n in &d.nodes {
                let token = format!("join:{}", n.name);
                server.add_join_token(&token, n.selectors.iter().cloned().collect());
                let link = Arc::new(LocalLink::new(server.clone()));
                let agent = Agent::new(link, n.agent.clone(), server.bundle())
                    .map_err(|e| invalid(format!("node {}: {e}", n.name)))?;
                let resource = format!("node:{}", n.name);
                match agent.bootstrap(&token, now) {
                    Ok(id) => self.audit.push(
                        now,
                        id.to_string(),
                        AuditKind::NodeAttest,
                        "node_attest",
                        resource,
                        Outcome::Allow,
                        "join_token",
                    ),
                    Err(e) => {
                        self.audit
                            .deny(now, UNATTESTED, "node_attest", resource, agent_code(&e))
                    }
                }
                self.nodes.insert(
                    n.name.clone(),
                    NodeRt {
                        name: n.name.clone(),
                        agent: Arc::new(agent),
                    },
                );
            }
        }
        for job in &self.scenario.jobs {
            if let Some(node) = &job.node {
                self.nodes[node]
                    .agent
                    .bind_workload(&job.name, job.workload.clone());
            }
        }
        Ok(())
    }

    pub fn now(&self) -> i64 {
        self.clock.now()
    }

    pub fn server(&self, td: &TrustDomain) -> Option<&Arc<ServerState>> {
        self.servers.get(td)
    }

    pub fn agent(&self, node: &str) -> Option<&Arc<Agent>> {
        self.nodes.get(node).map(|n| &n.agent)
    }

    /// Runs every job to completion.
    pub fn run(&mut self) {
        while let Some(idx) = self.next_job() {
            let ready = self.jobs[idx].ready_at;
            let now = self.clock.now();
            if ready > now {
                self.advance_clock(ready - now);
            }
            let job = self.scenario.jobs[idx].clone();
            let step = job.steps[self.jobs[idx].cursor].clone();
            self.jobs[idx].cursor += 1;
            self.execute(idx, &job, &step);
        }
    }

    fn next_job(&self) -> Option<usize> {
        self.jobs
            .iter()
            .enumerate()
            .filter(|(i, j)| j.cursor < self.scenario.jobs[*i].steps.len())
            .min_by_key(|(i, j)| (j.ready_at, *i))
            .map(|(i, _)| i)
    }

    pub fn finish(self) -> RunReport {
        let audit = self.audit.into_records();
        RunReport {
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            summary: Summary::of(&audit),
            finished_at: self.clock.now(),
            audit,
        }
    }

    /// Earliest pending rotation or maintenance instant.
    fn next_tick(&self) -> Option<i64> {
        let agents = self
            .nodes
            .values()
            .filter_map(|n| n.agent.next_rotation_at());
        let servers = self.servers.values().flat_map(|s| {
            let svid = s.svid();
            let renew = svid.issued_at + (svid.lifetime() + 1) / 2;
            std::iter::once(renew).chain(s.authority().next_prune_at())
        });
        agents.chain(servers).min()
    }

    /// Moves the clock forward by `delta` seconds, firing due rotation
    /// ticks in timestamp order on the way.
    pub fn advance_clock(&mut self, delta: i64) -> i64 {
        assert!(delta >= 0, "clock cannot move backwards");
        let start = self.clock.now();
        if delta == 0 {
            return start;
        }
        let target = start + delta;
        let mut floor = start;
        while let Some(t) = self.next_tick().map(|t| t.max(floor)) {
            if t > target {
                break;
            }
            self.clock.set(t);
            self.fire_ticks(t);
            floor = t + 1;
        }
        self.clock.set(target);
        target
    }

    fn fire_ticks(&mut self, now: i64) {
        for s in self.servers.values() {
            let before = s.svid().issued_at;
            if let Ok(m) = s.maintain(now) {
                if m.server_svid_renewed && s.svid().issued_at != before {
                    let svid = s.svid();
                    self.audit.push(
                        now,
                        svid.spiffe_id.to_string(),
                        AuditKind::SvidMinted,
                        "rotate",
                        "server",
                        Outcome::Allow,
                        format!("not_after={}", svid.not_after),
                    );
                }
            }
        }
        for node in self.nodes.values() {
            let due = node.agent.next_rotation_at().is_some_and(|t| t <= now);
            if !due {
                continue;
            }
            match node.agent.rotation_tick(now) {
                Ok(rotations) => {
                    for r in rotations {
                        push_rotation(&mut self.audit, now, &node.name, &r);
                    }
                }
                Err(e) => self.audit.push(
                    now,
                    node.agent
                        .agent_svid()
                        .map_or(UNATTESTED.to_owned(), |s| s.spiffe_id.to_string()),
                    AuditKind::SvidMinted,
                    "rotate",
                    format!("node:{}", node.name),
                    Outcome::Error,
                    agent_code(&e),
                ),
            }
        }
    }

    fn execute(&mut self, idx: usize, job: &JobDef, step: &Step) {
        let now = self.clock.now();
        let workload = format!("workload:{}", job.name);
        let agent = job.node.as_ref().map(|n| self.nodes[n].agent.clone());
        match step {
            Step::Sleep { seconds } => {
                self.jobs[idx].ready_at = now + seconds;
            }
            Step::FetchX509 => {
                let agent = agent.expect("validated");
                match agent.fetch_x509(&job.name, now) {
                    Ok(resp) => {
                        for svid in &resp.svids {
                            self.audit.push(
                                now,
                                svid.spiffe_id.to_string(),
                                AuditKind::WorkloadAttest,
                                "fetch_x509",
                                workload.clone(),
                                Outcome::Allow,
                                format!(
                                    "issued_at={} not_after={}",
                                    svid.issued_at, svid.not_after
                                ),
                            );
                        }
                        self.jobs[idx].identity = resp.svids.first().map(|s| s.spiffe_id.clone());
                    }
                    Err(e) => self.agent_failure(now, "fetch_x509", &workload, &e),
                }
            }
            Step::FetchJwt { aud } => {
                let agent = agent.expect("validated");
                match agent.fetch_jwt(&job.name, aud, now) {
                    Ok(tokens) => {
                        for t in &tokens {
                            self.audit.push(
                                now,
                                t.claims.sub.clone(),
                                AuditKind::JwtMinted,
                                "fetch_jwt",
                                t.claims.aud.join(","),
                                Outcome::Allow,
                                format!("exp={}", t.claims.exp),
                            );
                        }
                        let first = tokens.into_iter().next();
                        if let Some(sub) = first.as_ref().and_then(JwtSvid::spiffe_id) {
                            self.jobs[idx].identity.get_or_insert(sub);
                        }
                        self.jobs[idx].jwt = first;
                    }
                    Err(e) => self.agent_failure(now, "fetch_jwt", &aud.join(","), &e),
                }
            }
            Step::Exchange { role } => self.exchange(idx, role, now),
            Step::Access {
                policy,
                action,
                resource,
                context,
                use_credentials,
            } => {
                let Some(id) = self.jobs[idx].identity.clone() else {
                    self.audit
                        .deny(now, UNATTESTED, action, resource, "NoIdentity");
                    return;
                };
                let mut req = AccessRequest::new(id.clone(), action, resource);
                req.context = context.clone();
                let decision = evaluate(&self.policies[policy], &req, now);
                let Some(rule) = decision.matched_rule_id else {
                    self.audit
                        .deny(now, id.to_string(), action, resource, "PolicyDenied");
                    return;
                };
                if *use_credentials {
                    let ok = self.jobs[idx]
                        .credentials
                        .as_ref()
                        .is_some_and(|c| self.broker.validate_session(c, action, resource, now));
                    if !ok {
                        self.audit
                            .deny(now, id.to_string(), action, resource, "SessionRejected");
                        return;
                    }
                }
                self.audit.push(
                    now,
                    id.to_string(),
                    AuditKind::PolicyDecision,
                    action,
                    resource,
                    Outcome::Allow,
                    rule,
                );
            }
            Step::Handshake { peer } => {
                let peer_job = self
                    .scenario
                    .jobs
                    .iter()
                    .find(|j| &j.name == peer)
                    .cloned()
                    .expect("validated");
                self.handshake(job, &peer_job, now);
            }
            Step::RequestSvid { spiffe_id } => {
                let agent = agent.expect("validated");
                let actor = agent
                    .agent_svid()
                    .map_or(UNATTESTED.to_owned(), |s| s.spiffe_id.to_string());
                match agent.request_x509(spiffe_id, now) {
                    Ok(svid) => self.audit.push(
                        now,
                        actor,
                        AuditKind::SvidMinted,
                        "request_svid",
                        spiffe_id.to_string(),
                        Outcome::Allow,
                        format!("not_after={}", svid.not_after),
                    ),
                    Err(e) => self.audit.deny(
                        now,
                        actor,
                        "request_svid",
                        spiffe_id.to_string(),
                        agent_code(&e),
                    ),
                }
            }
            Step::Federate { domain, peer } => {
                let server = self.servers[domain].clone();
                let actor = server.server_id().to_string();
                match server.refresh_federated_bundle(peer, &self.transport, now) {
                    Ok(bundle) => self.audit.push(
                        now,
                        actor,
                        AuditKind::Federation,
                        "fetch_bundle",
                        peer.to_string(),
                        Outcome::Allow,
                        format!("sequence={}", bundle.sequence),
                    ),
                    Err(e @ crate::server::FederationError::PeerUnreachable(_)) => self.audit.push(
                        now,
                        actor,
                        AuditKind::Federation,
                        "fetch_bundle",
                        peer.to_string(),
                        Outcome::Error,
                        e.code(),
                    ),
                    Err(e) => {
                        self.audit
                            .deny(now, actor, "fetch_bundle", peer.to_string(), e.code())
                    }
                }
            }
        }
    }

    fn agent_failure(&mut self, now: i64, action: &str, resource: &str, e: &AgentError) {
        match e {
            AgentError::ServerUnreachable(_) => self.audit.push(
                now,
                UNATTESTED,
                AuditKind::WorkloadAttest,
                action,
                resource,
                Outcome::Error,
                agent_code(e),
            ),
            _ => self
                .audit
                .deny(now, UNATTESTED, action, resource, agent_code(e)),
        }
    }

    fn exchange(&mut self, idx: usize, role: &str, now: i64) {
        let action = "sts:AssumeRoleWithWebIdentity";
        let Some(jwt) = self.jobs[idx].jwt.clone() else {
            self.audit.push(
                now,
                UNATTESTED,
                AuditKind::StsExchange,
                action,
                role,
                Outcome::Error,
                "NoToken",
            );
            return;
        };
        for s in self.servers.values() {
            self.broker.set_issuer_bundle(s.bundle());
        }
        let frame = serde_json::to_vec(&BrokerRequest::AssumeRole {
            role: role.to_owned(),
            token: jwt.token.clone(),
        })
        .expect("request serializes");
        let reply = self.broker.handle_frame(&frame, now);
        let actor = jwt.claims.sub.clone();
        match Response::from_bytes(&reply).and_then(Response::into_result::<ScopedCredentials>) {
            Ok(creds) => {
                self.audit.push(
                    now,
                    actor,
                    AuditKind::StsExchange,
                    action,
                    role,
                    Outcome::Allow,
                    format!("expires_at={}", creds.expires_at),
                );
                self.jobs[idx].credentials = Some(creds);
            }
            Err(e) => {
                self.jobs[idx].credentials = None;
                self.audit.deny(now, actor, action, role, e.code);
            }
        }
    }

    fn workload_svid(&self, job: &JobDef, now: i64) -> Result<X509Response, AgentError> {
        let node = job.node.as_ref().expect("validated");
        self.nodes[node].agent.fetch_x509(&job.name, now)
    }

    fn handshake(&mut self, job: &JobDef, peer: &JobDef, now: i64) {
        let peer_resource = format!("workload:{}", peer.name);
        let Ok(mine) = self.workload_svid(job, now) else {
            self.audit
                .deny(now, UNATTESTED, "mtls", peer_resource, "NoIdentity");
            return;
        };
        let me = &mine.svids[0];
        let Ok(theirs) = self.workload_svid(peer, now) else {
            self.audit.deny(
                now,
                me.spiffe_id.to_string(),
                "mtls",
                peer_resource,
                "PeerNoIdentity",
            );
            return;
        };
        let them = &theirs.svids[0];
        match mutual_handshake(me, mine.trust_set(), them, theirs.trust_set(), now) {
            Ok(outcome) => self.audit.push(
                now,
                outcome.responder_saw.to_string(),
                AuditKind::Handshake,
                "mtls",
                outcome.initiator_saw.to_string(),
                Outcome::Allow,
                "mutual",
            ),
            Err(e) => {
                let cause = e.svid_cause().map_or("Tls", |c| c.code());
                self.audit.deny(
                    now,
                    me.spiffe_id.to_string(),
                    "mtls",
                    peer_resource,
                    format!("HandshakeFailed({cause})"),
                );
            }
        }
    }
}

fn push_rotation(audit: &mut AuditLog, now: i64, node: &str, r: &Rotation) {
    let resource = match &r.handle {
        Some(h) => format!("workload:{h}"),
        None => format!("node:{node}"),
    };
    audit.push(
        now,
        r.spiffe_id.to_string(),
        AuditKind::SvidMinted,
        "rotate",
        resource,
        Outcome::Allow,
        format!("not_after={}", r.not_after),
    );
}

/// Audit detail for an agent failure: the server's code where there is one.
fn agent_code(e: &AgentError) -> String {
    match e {
        AgentError::ServerRejected(code) | AgentError::NodeAttestFailed(code) => code.clone(),
        other => other.code().to_owned(),
    }
}
