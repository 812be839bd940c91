//! Acceptance suite. Prints one `PASS` or `FAIL` line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Every randomized corpus is drawn from a fixed seed. Oracles are written
//! here from first principles and never call the code under test.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use minispiffe_core::agent::{Agent, AgentSettings, LocalLink, WorkloadInfo};
use minispiffe_core::attestation::{match_entries, selectors};
use minispiffe_core::crypto::{
    verify_jwt_svid, verify_x509_svid, verify_x509_svid_in, JwtError, SvidError,
};
use minispiffe_core::id::SpiffeIdError;
use minispiffe_core::policy::Scalar;
use minispiffe_core::server::{FederationPeer, LocalTransport, ServerSettings, ServerState};
use minispiffe_core::sim::Step;
use minispiffe_core::sts::{StsError, SubjectCondition};
use minispiffe_core::{
    evaluate, parse_policy, run_scenario, AccessRequest, Authority, AuthorityConfig, Broker,
    RegistrationEntry, Scenario, Selector, SelectorSet, SpiffeId, StsTrustPolicy, TrustBundle,
    TrustDomain,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn id(s: &str) -> SpiffeId {
    SpiffeId::parse(s).unwrap_or_else(|e| panic!("{s}: {e}"))
}

fn td(s: &str) -> TrustDomain {
    TrustDomain::new(s).unwrap_or_else(|e| panic!("{s}: {e}"))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn word(rng: &mut ChaCha8Rng, alphabet: &[u8], len: std::ops::RangeInclusive<usize>) -> String {
    let n = rng.gen_range(len);
    (0..n)
        .map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char)
        .collect()
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let elapsed = start.elapsed();
    if elapsed < limit {
        Ok(elapsed)
    } else {
        Err(format!("took {elapsed:.2?}, limit {limit:?}"))
    }
}

// ---------------------------------------------------------------------------
// 1. SPIFFE ID grammar

const TD_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789-";
const SEG_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._-";

fn gen_td(rng: &mut ChaCha8Rng) -> String {
    let labels: Vec<String> = (0..rng.gen_range(1..=3))
        .map(|_| word(rng, TD_CHARS, 1..=12))
        .collect();
    labels.join(".")
}

fn gen_segment(rng: &mut ChaCha8Rng) -> String {
    loop {
        let s = word(rng, SEG_CHARS, 1..=16);
        if s != "." && s != ".." {
            return s;
        }
    }
}

fn join_id(td: &str, segments: &[String]) -> String {
    let path: String = segments.iter().map(|s| format!("/{s}")).collect();
    format!("spiffe://{td}{path}")
}

fn gen_valid(rng: &mut ChaCha8Rng) -> (String, String, Vec<String>) {
    let td = gen_td(rng);
    let segments: Vec<String> = (0..rng.gen_range(0..=5))
        .map(|_| gen_segment(rng))
        .collect();
    (join_id(&td, &segments), td, segments)
}

/// One invalid string per call, each carrying exactly one defect of `category`.
fn gen_invalid(rng: &mut ChaCha8Rng, category: SpiffeIdError) -> String {
    let (valid, td, segments) = gen_valid(rng);
    match category {
        SpiffeIdError::WrongScheme => {
            let schemes = [
                "http://",
                "https://",
                "spiffe:/",
                "spiffe:",
                "spiffe//",
                "spife://",
                "file://",
                " spiffe://",
                "urn:spiffe:",
                "spiffe:\\\\",
                "",
            ];
            let scheme = schemes.choose(rng).unwrap();
            format!("{scheme}{}", &valid["spiffe://".len()..])
        }
        SpiffeIdError::EmptyTrustDomain => join_id("", &segments),
        SpiffeIdError::BadTrustDomainChar => {
            let mut chars: Vec<char> = td.chars().collect();
            let bad = [
                '_', '@', ':', '!', '%', '~', ' ', '+', '?', '#', '*', '$', '\u{e9}',
            ];
            let at = rng.gen_range(0..=chars.len());
            if rng.gen_bool(0.2) {
                let s = match (rng.gen_range(0..3), td.find('.')) {
                    (0, _) => format!(".{td}"),
                    (1, _) => format!("{td}."),
                    (_, Some(dot)) => format!("{}.{}", &td[..dot], &td[dot..]),
                    (_, None) => format!("{td}..x"),
                };
                return join_id(&s, &segments);
            }
            chars.insert(at, *bad.choose(rng).unwrap());
            join_id(&chars.into_iter().collect::<String>(), &segments)
        }
        SpiffeIdError::BadSegment => {
            let mut segs = segments.clone();
            let defect = match rng.gen_range(0..4) {
                0 => String::new(),
                1 => ".".to_owned(),
                2 => "..".to_owned(),
                _ => {
                    let base = gen_segment(rng);
                    let bad = [
                        '%', '?', '#', ' ', '~', '*', ':', '@', '\u{fc}', '=', '+', '\\',
                    ];
                    let at = rng.gen_range(0..=base.len());
                    let mut s = base;
                    s.insert(at, *bad.choose(rng).unwrap());
                    s
                }
            };
            let at = rng.gen_range(0..=segs.len());
            segs.insert(at, defect);
            join_id(&td, &segs)
        }
        SpiffeIdError::TooLong => {
            if rng.gen_bool(0.5) {
                let mut long_td = td;
                while long_td.len() <= 255 {
                    long_td.push('.');
                    long_td.push_str(&word(rng, TD_CHARS, 1..=40));
                }
                join_id(&long_td, &segments)
            } else {
                let mut segs = segments;
                while join_id(&td, &segs).len() <= 2048 {
                    segs.push(gen_segment(rng));
                }
                join_id(&td, &segs)
            }
        }
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(1);
    for _ in 0..10_000 {
        let (text, td_text, segments) = gen_valid(&mut rng);
        let parsed = SpiffeId::parse(&text).map_err(|e| format!("{text:?} rejected: {e}"))?;
        ensure!(parsed.to_string() == text, "{text:?} printed as {parsed}");
        ensure!(
            parsed.trust_domain().as_str() == td_text,
            "{text:?}: trust domain {}",
            parsed.trust_domain()
        );
        ensure!(
            parsed.segments() == segments.as_slice(),
            "{text:?}: segments {:?}",
            parsed.segments()
        );
        let rebuilt = SpiffeId::from_segments(td(&td_text), &segments)
            .map_err(|e| format!("{text:?}: {e}"))?;
        ensure!(rebuilt == parsed, "{text:?}: component form differs");
        let json = serde_json::to_string(&parsed).map_err(|e| e.to_string())?;
        let back: SpiffeId = serde_json::from_str(&json).map_err(|e| format!("{json}: {e}"))?;
        ensure!(back == parsed, "{json}: serde round trip differs");
    }

    let literals: [(&str, &str, &[&str]); 7] = [
        (
            "spiffe://org.example/frontend/build-runner",
            "org.example",
            &["frontend", "build-runner"],
        ),
        (
            "spiffe://platform.example.org/ci/team-a/release-runner",
            "platform.example.org",
            &["ci", "team-a", "release-runner"],
        ),
        ("spiffe://ci/org/deploy-job", "ci", &["org", "deploy-job"]),
        ("spiffe://ci/org/deploy", "ci", &["org", "deploy"]),
        ("spiffe://ci/org/release-job", "ci", &["org", "release-job"]),
        (
            "spiffe://org.example/spire/agent/k8s-node",
            "org.example",
            &["spire", "agent", "k8s-node"],
        ),
        ("spiffe://org.example", "org.example", &[]),
    ];
    for (text, want_td, want_segments) in literals {
        let parsed = SpiffeId::parse(text).map_err(|e| format!("{text}: {e}"))?;
        ensure!(
            parsed.trust_domain().as_str() == want_td,
            "{text}: trust domain {}",
            parsed.trust_domain()
        );
        ensure!(
            parsed.segments() == want_segments,
            "{text}: segments {:?}",
            parsed.segments()
        );
        ensure!(parsed.to_string() == text, "{text}: printed as {parsed}");
    }

    let categories = [
        SpiffeIdError::WrongScheme,
        SpiffeIdError::EmptyTrustDomain,
        SpiffeIdError::BadTrustDomainChar,
        SpiffeIdError::BadSegment,
        SpiffeIdError::TooLong,
    ];
    let mut rejected = 0;
    for category in categories {
        for _ in 0..120 {
            let text = gen_invalid(&mut rng, category);
            match SpiffeId::parse(&text) {
                Ok(parsed) => return Err(format!("{text:?} accepted as {parsed}")),
                Err(e) => ensure!(
                    e == category,
                    "{text:?}: {} instead of {}",
                    e.code(),
                    category.code()
                ),
            }
            rejected += 1;
        }
    }
    let elapsed = within(start, Duration::from_secs(5))?;
    Ok(format!(
        "10000 valid IDs round-trip, {} literals parse, {rejected} invalid strings rejected by category ({elapsed:.2?})",
        literals.len()
    ))
}

// ---------------------------------------------------------------------------
// 2. Attestation oracle equivalence

/// Entries under `parent` whose every selector appears in `observed`,
/// ordered by entry id.
fn subset_scan(
    entries: &[RegistrationEntry],
    parent: &SpiffeId,
    observed: &[Selector],
) -> Vec<String> {
    let mut out = Vec::new();
    for e in entries {
        if e.parent_id.to_string() != parent.to_string() {
            continue;
        }
        let mut all = true;
        for s in &e.selectors {
            if !observed
                .iter()
                .any(|o| o.kind() == s.kind() && o.value() == s.value())
            {
                all = false;
                break;
            }
        }
        if all {
            out.push(e.entry_id.clone());
        }
    }
    out.sort();
    out
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(2);
    let parents: Vec<SpiffeId> = ["a", "b", "c", "d"]
        .iter()
        .map(|n| id(&format!("spiffe://ci/spire/agent/{n}")))
        .collect();
    let universe: Vec<Selector> = ["k8s_sa", "env", "sim", "unix_path"]
        .iter()
        .flat_map(|kind| (0..3).map(move |v| Selector::new(kind, &format!("v{v}")).unwrap()))
        .collect();
    let mut matched = 0usize;
    for case in 0..10_000 {
        let n = rng.gen_range(0..=16);
        let entries: Vec<RegistrationEntry> = (0..n)
            .map(|i| RegistrationEntry {
                entry_id: format!("{:08x}-{i}", rng.gen::<u32>()),
                spiffe_id: id(&format!("spiffe://ci/w/{i}")),
                parent_id: parents[rng.gen_range(0..3)].clone(),
                selectors: {
                    let k = rng.gen_range(1..=3);
                    universe.choose_multiple(&mut rng, k).cloned().collect()
                },
                ttl_seconds: 3600,
                is_node_entry: false,
            })
            .collect();
        let parent = &parents[rng.gen_range(0..parents.len())];
        let k = rng.gen_range(0..=8);
        let observed: Vec<Selector> = universe.choose_multiple(&mut rng, k).cloned().collect();
        let observed_set: SelectorSet = observed.iter().cloned().collect();
        let got: Vec<String> = match_entries(&entries, parent, &observed_set)
            .into_iter()
            .map(|e| e.entry_id.clone())
            .collect();
        let want = subset_scan(&entries, parent, &observed);
        ensure!(
            got == want,
            "case {case}: match_entries {got:?}, oracle {want:?}"
        );
        matched += want.len();
    }
    let elapsed = within(start, Duration::from_secs(10))?;
    Ok(format!(
        "10000 instances, 0 mismatches, {matched} matches total ({elapsed:.2?})"
    ))
}

// ---------------------------------------------------------------------------
// 3. SVID closure and isolation

const T0: i64 = 1_717_196_400;

/// `cells[i][j]`: SVID minted by domain i, verified against domain j's trust set.
fn matrix(
    servers: &[Arc<ServerState>],
    svids: &[minispiffe_core::X509Svid],
    now: i64,
) -> Vec<Vec<Result<SpiffeId, SvidError>>> {
    svids
        .iter()
        .map(|svid| {
            servers
                .iter()
                .map(|verifier| {
                    verify_x509_svid_in(
                        &svid.leaf,
                        &svid.intermediates,
                        verifier.trust_set().iter(),
                        now,
                    )
                })
                .collect()
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let names = ["alpha.example", "beta.example", "gamma.example"];
    let servers: Vec<Arc<ServerState>> = names
        .iter()
        .map(|n| Arc::new(ServerState::new(td(n), ServerSettings::default(), T0).unwrap()))
        .collect();
    let svids: Vec<_> = servers
        .iter()
        .zip(names)
        .map(|(s, n)| {
            s.authority()
                .mint_x509_svid(&id(&format!("spiffe://{n}/ci/job")), 3600, T0)
                .unwrap()
        })
        .collect();
    let now = T0 + 60;

    let expect = |federated: &[(usize, usize)]| -> Vec<Vec<Result<SpiffeId, SvidError>>> {
        (0..3)
            .map(|i| {
                (0..3)
                    .map(|j| {
                        if i == j || federated.contains(&(i, j)) {
                            Ok(svids[i].spiffe_id.clone())
                        } else {
                            Err(SvidError::UnknownRoot)
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let before = matrix(&servers, &svids, now);
    ensure!(before == expect(&[]), "before federation: {before:?}");

    let transport = LocalTransport::new();
    for (s, n) in servers.iter().zip(names) {
        transport.register(n, s.clone());
    }
    for (a, b) in [(0, 1), (1, 0)] {
        let peer = FederationPeer::new(td(names[b]), names[b], servers[b].bundle(), 300)
            .map_err(|e| e.to_string())?;
        servers[a]
            .add_federation_peer(peer)
            .map_err(|e| e.to_string())?;
    }
    for (a, b) in [(0, 1), (1, 0)] {
        servers[a]
            .refresh_federated_bundle(&td(names[b]), &transport, now)
            .map_err(|e| format!("{} fetching {}: {e}", names[a], names[b]))?;
    }
    let after = matrix(&servers, &svids, now);
    ensure!(
        after == expect(&[(0, 1), (1, 0)]),
        "after federation: {after:?}"
    );
    let flipped: Vec<(usize, usize)> = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .filter(|&(i, j)| before[i][j] != after[i][j])
        .collect();
    ensure!(flipped == [(0, 1), (1, 0)], "flipped cells {flipped:?}");
    Ok(
        "9-cell matrix exact before federation; only (A,B) and (B,A) flip after exchange"
            .to_owned(),
    )
}

// ---------------------------------------------------------------------------
// 4. JWT lifecycle

struct TokenFixture {
    bundle: TrustBundle,
    token: String,
    claims: Value,
}

fn token_fixture() -> Result<TokenFixture, String> {
    let path = fixtures().join("sts/deploy-token.json");
    let doc: Value = serde_json::from_str(&read(&path)?).map_err(|e| e.to_string())?;
    Ok(TokenFixture {
        bundle: TrustBundle::from_json(doc["bundle"].clone()).map_err(|e| e.to_string())?,
        token: doc["token"].as_str().ok_or("token missing")?.to_owned(),
        claims: doc["claims"].clone(),
    })
}

fn mutate(rng: &mut ChaCha8Rng, token: &str) -> String {
    let mut bytes = token.as_bytes().to_vec();
    let at = rng.gen_range(0..bytes.len());
    let original = bytes[at];
    bytes[at] = loop {
        let b = rng.gen_range(0x21u8..0x7f);
        if b != original {
            break b;
        }
    };
    String::from_utf8(bytes).expect("printable ASCII")
}

fn criterion_4() -> Outcome {
    let fx = token_fixture()?;
    const AUD: &str = "sts.amazonaws.com";
    let claims = verify_jwt_svid(&fx.token, &fx.bundle, AUD, 1_717_198_000)
        .map_err(|e| format!("fixture rejected at 1717198000: {e}"))?;
    ensure!(
        claims.sub == "spiffe://ci/org/deploy-job",
        "sub {}",
        claims.sub
    );
    ensure!(claims.iss == "spiffe://org.example", "iss {}", claims.iss);
    ensure!(claims.exp == 1_717_200_000, "exp {}", claims.exp);
    ensure!(claims.aud == [AUD], "aud {:?}", claims.aud);
    ensure!(
        serde_json::to_value(&claims).map_err(|e| e.to_string())? == fx.claims,
        "claims differ from the fixture's recorded claims"
    );

    let late = verify_jwt_svid(&fx.token, &fx.bundle, AUD, 1_717_200_031);
    ensure!(late == Err(JwtError::Expired), "at 1717200031: {late:?}");
    ensure!(
        verify_jwt_svid(&fx.token, &fx.bundle, AUD, 1_717_200_029).is_ok(),
        "rejected inside the skew window"
    );

    let mut rng = rng(4);
    let mut audiences: Vec<String> = [
        "sts.amazonaws.com.",
        "STS.AMAZONAWS.COM",
        "sts.amazonaws.co",
        "sts",
        " sts.amazonaws.com",
        "spiffe://org.example",
        "https://sts.amazonaws.com",
        "",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    audiences.extend((0..200).map(|_| word(&mut rng, SEG_CHARS, 1..=24)));
    for aud in audiences.iter().filter(|a| *a != AUD) {
        let r = verify_jwt_svid(&fx.token, &fx.bundle, aud, 1_717_198_000);
        ensure!(
            r == Err(JwtError::AudienceMismatch),
            "audience {aud:?}: {r:?}"
        );
    }

    let mut seen = BTreeSet::new();
    for _ in 0..1000 {
        let tampered = mutate(&mut rng, &fx.token);
        if let Ok(c) = verify_jwt_svid(&tampered, &fx.bundle, AUD, 1_717_198_000) {
            return Err(format!("mutation accepted: {tampered} -> {c:?}"));
        }
        seen.insert(tampered);
    }
    Ok(format!(
        "verifies at 1717198000, Expired at 1717200031, {} other audiences AudienceMismatch, 1000 mutations ({} distinct) rejected",
        audiences.len(),
        seen.len()
    ))
}

// ---------------------------------------------------------------------------
// 5. Rotation continuity

fn criterion_5() -> Outcome {
    let server = Arc::new(
        ServerState::new(td("ci"), ServerSettings::default(), T0).map_err(|e| e.to_string())?,
    );
    let entry = |spiffe: &str, parent: &str, sel: &str, node: bool| RegistrationEntry {
        entry_id: String::new(),
        spiffe_id: id(spiffe),
        parent_id: id(parent),
        selectors: selectors([sel]).unwrap(),
        ttl_seconds: 3600,
        is_node_entry: node,
    };
    server
        .register_entry(entry(
            "spiffe://ci/spire/agent/node-1",
            "spiffe://ci/spire/server",
            "sim:node=node-1",
            true,
        ))
        .map_err(|e| e.to_string())?;
    server
        .register_entry(entry(
            "spiffe://ci/org/poller",
            "spiffe://ci/spire/agent/node-1",
            "env:JOB=poll",
            false,
        ))
        .map_err(|e| e.to_string())?;
    server.add_join_token("join", selectors(["sim:node=node-1"]).unwrap());
    let link = Arc::new(LocalLink::new(server.clone()));
    let settings = AgentSettings::default();
    ensure!(
        settings.rotation_threshold == 0.5,
        "threshold {}",
        settings.rotation_threshold
    );
    let agent = Agent::new(link, settings, server.bundle()).map_err(|e| e.to_string())?;
    agent.bootstrap("join", T0).map_err(|e| e.to_string())?;
    agent.bind_workload(
        "poller",
        WorkloadInfo {
            env: [("JOB".to_owned(), "poll".to_owned())].into(),
            ..WorkloadInfo::default()
        },
    );

    const TTL: i64 = 3600;
    const MARGIN: i64 = 30;
    let mut serials = BTreeSet::new();
    let mut min_headroom = i64::MAX;
    for now in T0..=T0 + 3 * TTL {
        server
            .maintain(now)
            .map_err(|e| format!("t+{}: maintain: {e}", now - T0))?;
        agent
            .rotation_tick(now)
            .map_err(|e| format!("t+{}: rotation: {e}", now - T0))?;
        let resp = agent
            .fetch_x509("poller", now)
            .map_err(|e| format!("t+{}: no SVID: {e}", now - T0))?;
        let mut valid = 0;
        for svid in &resp.svids {
            ensure!(
                svid.lifetime() == TTL,
                "t+{}: lifetime {}",
                now - T0,
                svid.lifetime()
            );
            let headroom = svid.not_after - now;
            ensure!(
                headroom > MARGIN,
                "t+{}: served an SVID {headroom}s before expiry",
                now - T0
            );
            min_headroom = min_headroom.min(headroom);
            if verify_x509_svid(&svid.leaf, &svid.intermediates, &resp.bundle, now).is_ok() {
                valid += 1;
            }
            serials.insert(svid.serial());
        }
        ensure!(valid > 0, "t+{}: zero valid SVIDs", now - T0);
    }
    ensure!(
        serials.len() >= 6,
        "only {} distinct SVIDs over three lifetimes",
        serials.len()
    );
    Ok(format!(
        "{} one-second polls, {} distinct SVIDs, minimum headroom {min_headroom}s",
        3 * TTL + 1,
        serials.len()
    ))
}

// ---------------------------------------------------------------------------
// 6. Policy fixtures and the per-clause oracle

fn pattern_matches(pattern: &str, value: &str) -> bool {
    if pattern == "*" || pattern == "**" {
        return true;
    }
    match pattern.strip_suffix("**") {
        Some(prefix) => value.starts_with(prefix),
        None => pattern == value,
    }
}

fn segments_match(pattern: &[&str], id: &[&str]) -> bool {
    match (pattern.first(), id.first()) {
        (None, None) => true,
        (Some(&"**"), _) => true,
        (Some(&"*"), Some(_)) => segments_match(&pattern[1..], &id[1..]),
        (Some(lit), Some(seg)) => lit == seg && segments_match(&pattern[1..], &id[1..]),
        _ => false,
    }
}

fn principal_matches(pattern: &str, id: &str) -> bool {
    let split = |s: &'_ str| -> Option<(String, Vec<String>)> {
        let rest = s.strip_prefix("spiffe://")?;
        let mut parts = rest.split('/');
        let td = parts.next()?.to_owned();
        Some((td, parts.map(str::to_owned).collect()))
    };
    let (Some((ptd, psegs)), Some((itd, isegs))) = (split(pattern), split(id)) else {
        return false;
    };
    let p: Vec<&str> = psegs.iter().map(String::as_str).collect();
    let i: Vec<&str> = isegs.iter().map(String::as_str).collect();
    (ptd == "*" || ptd == itd) && segments_match(&p, &i)
}

#[derive(Debug, Clone)]
enum Lit {
    Int(i64),
    Str(String),
    List(Vec<Lit>),
}

#[derive(Debug, Clone)]
struct ModelCondition {
    key: &'static str,
    op: &'static str,
    lit: Lit,
}

#[derive(Debug, Clone)]
struct ModelRule {
    id: String,
    principal: String,
    action: String,
    resource: String,
    conditions: Vec<ModelCondition>,
}

fn render_lit(lit: &Lit) -> String {
    match lit {
        Lit::Int(i) => i.to_string(),
        Lit::Str(s) => format!("{s:?}"),
        Lit::List(items) => format!(
            "[{}]",
            items.iter().map(render_lit).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn render_rules(rules: &[ModelRule]) -> String {
    rules
        .iter()
        .map(|r| {
            let when = if r.conditions.is_empty() {
                String::new()
            } else {
                let clauses: Vec<String> = r
                    .conditions
                    .iter()
                    .map(|c| format!("{} {} {}", c.key, c.op, render_lit(&c.lit)))
                    .collect();
                format!(" when {{ {} }}", clauses.join(", "))
            };
            format!(
                "permit {} principal \"{}\" action \"{}\" resource \"{}\"{when};\n",
                r.id, r.principal, r.action, r.resource
            )
        })
        .collect()
}

fn lit_equals(lit: &Lit, value: &Scalar) -> bool {
    match (lit, value) {
        (Lit::Int(a), Scalar::Int(b)) => a == b,
        (Lit::Str(a), Scalar::Str(b)) => a == b,
        _ => false,
    }
}

fn condition_holds(c: &ModelCondition, context: &BTreeMap<String, Scalar>, now: i64) -> bool {
    let value = match context.get(c.key) {
        Some(v) => v.clone(),
        None if c.key == "now" => Scalar::Int(now),
        None => return false,
    };
    match (c.op, &c.lit, &value) {
        ("==", lit, v) => lit_equals(lit, v),
        ("!=", Lit::Int(_), Scalar::Int(_)) | ("!=", Lit::Str(_), Scalar::Str(_)) => {
            !lit_equals(&c.lit, &value)
        }
        ("in", Lit::List(items), v) => items.iter().any(|i| lit_equals(i, v)),
        ("before", Lit::Int(t), Scalar::Int(v)) => v < t,
        ("after", Lit::Int(t), Scalar::Int(v)) => v > t,
        _ => false,
    }
}

/// Lowest rule id among rules whose every clause holds.
fn oracle_decision(rules: &[ModelRule], req: &AccessRequest, now: i64) -> Option<String> {
    let principal = req.spiffe_id.to_string();
    let mut matching: Vec<&str> = Vec::new();
    for r in rules {
        let clauses = [
            principal_matches(&r.principal, &principal),
            pattern_matches(&r.action, &req.action),
            pattern_matches(&r.resource, &req.resource),
        ];
        if clauses.iter().all(|&c| c)
            && r.conditions
                .iter()
                .all(|c| condition_holds(c, &req.context, now))
        {
            matching.push(&r.id);
        }
    }
    matching.into_iter().min().map(str::to_owned)
}

fn random_rule(rng: &mut ChaCha8Rng, id: String) -> ModelRule {
    let td = *["ci", "org.example", "*"].choose(rng).unwrap();
    let mut segs: Vec<&str> = (0..rng.gen_range(0..=3))
        .map(|_| {
            *["org", "deploy", "build", "team-a", "*"]
                .choose(rng)
                .unwrap()
        })
        .collect();
    if rng.gen_bool(0.3) {
        segs.push("**");
    }
    let principal = join_id(td, &segs.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    let conditions = (0..rng.gen_range(0..=2))
        .map(|_| {
            let key = *["env", "tier", "n", "now"].choose(rng).unwrap();
            let scalar = |rng: &mut ChaCha8Rng| {
                if rng.gen_bool(0.5) {
                    Lit::Int(rng.gen_range(0..4))
                } else {
                    Lit::Str(["prod", "dev", "a"].choose(rng).unwrap().to_string())
                }
            };
            let (op, lit) = match rng.gen_range(0..5) {
                0 => ("==", scalar(rng)),
                1 => ("!=", scalar(rng)),
                2 => (
                    "in",
                    Lit::List((0..rng.gen_range(1..=3)).map(|_| scalar(rng)).collect()),
                ),
                3 => ("before", Lit::Int(rng.gen_range(0..200))),
                _ => ("after", Lit::Int(rng.gen_range(0..200))),
            };
            ModelCondition { key, op, lit }
        })
        .collect();
    ModelRule {
        id,
        principal,
        action: ["write", "read", "publish", "*", "delete"]
            .choose(rng)
            .unwrap()
            .to_string(),
        resource: ["s3://b", "s3://b/**", "release-bucket", "*", "s3://**"]
            .choose(rng)
            .unwrap()
            .to_string(),
        conditions,
    }
}

fn random_request(rng: &mut ChaCha8Rng) -> (AccessRequest, i64) {
    let td = *["ci", "org.example"].choose(rng).unwrap();
    let segs: Vec<String> = (0..rng.gen_range(0..=3))
        .map(|_| {
            ["org", "deploy", "build", "team-a", "x"]
                .choose(rng)
                .unwrap()
                .to_string()
        })
        .collect();
    let mut req = AccessRequest::new(
        id(&join_id(td, &segs)),
        ["write", "read", "publish", "wrx", "delete"]
            .choose(rng)
            .unwrap(),
        ["s3://b", "s3://b/k", "release-bucket", "s3://c", "x"]
            .choose(rng)
            .unwrap(),
    );
    for key in ["env", "tier", "n", "now"] {
        if rng.gen_bool(0.5) {
            let v = if rng.gen_bool(0.5) {
                Scalar::Int(rng.gen_range(0..200))
            } else {
                Scalar::Str(["prod", "dev", "a", "3"].choose(rng).unwrap().to_string())
            };
            req.context.insert(key.to_owned(), v);
        }
    }
    (req, rng.gen_range(0..200))
}

fn perturb_action(a: &str, other: &str) -> [String; 9] {
    [
        a.to_uppercase(),
        format!("{a}s"),
        a[..a.len() - 1].to_owned(),
        format!(" {a}"),
        "read".to_owned(),
        "delete".to_owned(),
        "*".to_owned(),
        String::new(),
        other.to_owned(),
    ]
}

fn perturb_resource(r: &str, other: &str) -> [String; 9] {
    [
        format!("{r}/"),
        format!("{r}/extra"),
        r[..r.len() - 1].to_owned(),
        r.to_uppercase(),
        format!("{r}-staging"),
        "s3://other-bucket".to_owned(),
        "*".to_owned(),
        String::new(),
        other.to_owned(),
    ]
}

const PRINCIPAL_PERTURBATIONS: [&str; 9] = [
    "spiffe://ci/org/other",
    "spiffe://ci/org/deploy-job",
    "spiffe://ci/org",
    "spiffe://ci/org/deploy/extra",
    "spiffe://ci",
    "spiffe://org.example/org/deploy",
    "spiffe://ci/other/deploy",
    "spiffe://ci/org/Deploy",
    "spiffe://ci.example/org/deploy",
];

fn criterion_6() -> Outcome {
    let write_src = read(&fixtures().join("policies/release-write.policy"))?;
    let publish_src = read(&fixtures().join("policies/release-publish.policy"))?;
    let write = parse_policy(&write_src).map_err(|e| e.to_string())?;
    let publish = parse_policy(&publish_src).map_err(|e| e.to_string())?;
    let both = parse_policy(&format!("{write_src}{publish_src}")).map_err(|e| e.to_string())?;

    const DEPLOY: &str = "spiffe://ci/org/deploy";
    let triples = [
        (DEPLOY, "write", "s3://prod-release-artifacts", "r1"),
        (DEPLOY, "publish", "release-bucket", "r2"),
    ];
    let decide =
        |set, p: &str, a: &str, r: &str| evaluate(set, &AccessRequest::new(id(p), a, r), T0);

    for (i, &(p, a, r, rule)) in triples.iter().enumerate() {
        let own = if rule == "r1" { &write } else { &publish };
        let foreign = if rule == "r1" { &publish } else { &write };
        let d = decide(own, p, a, r);
        ensure!(
            d.allow && d.matched_rule_id.as_deref() == Some(rule),
            "{p} {a} {r}: {d:?}"
        );
        ensure!(
            !decide(foreign, p, a, r).allow,
            "{p} {a} {r} allowed by the other policy"
        );
        ensure!(
            decide(&both, p, a, r).allow,
            "{p} {a} {r} denied by the combined set"
        );

        let (_, other_a, other_r, _) = triples[1 - i];
        let mut grid: Vec<(String, String, String)> = Vec::new();
        grid.extend(
            PRINCIPAL_PERTURBATIONS
                .iter()
                .map(|q| (q.to_string(), a.to_owned(), r.to_owned())),
        );
        grid.extend(
            perturb_action(a, other_a)
                .into_iter()
                .map(|x| (p.to_owned(), x, r.to_owned())),
        );
        grid.extend(
            perturb_resource(r, other_r)
                .into_iter()
                .map(|x| (p.to_owned(), a.to_owned(), x)),
        );
        ensure!(grid.len() == 27, "grid has {} cases", grid.len());
        let distinct: BTreeSet<_> = grid.iter().collect();
        ensure!(distinct.len() == 27, "grid has duplicate cases");
        for (q, x, y) in &grid {
            ensure!(
                (q.as_str(), x.as_str(), y.as_str()) != (p, a, r),
                "grid contains the original triple"
            );
            let d = decide(&both, q, x, y);
            ensure!(
                !d.allow,
                "perturbation ({q}, {x:?}, {y:?}) allowed via {:?}",
                d.matched_rule_id
            );
        }
    }

    let principals: BTreeSet<&str> = PRINCIPAL_PERTURBATIONS
        .iter()
        .copied()
        .chain([DEPLOY])
        .collect();
    let actions: BTreeSet<String> = triples
        .iter()
        .flat_map(|&(_, a, _, _)| perturb_action(a, "read").into_iter().chain([a.to_owned()]))
        .collect();
    let resources: BTreeSet<String> = triples
        .iter()
        .flat_map(|&(_, _, r, _)| perturb_resource(r, "x").into_iter().chain([r.to_owned()]))
        .collect();
    let mut allowed = BTreeSet::new();
    for p in &principals {
        for a in &actions {
            for r in &resources {
                if decide(&both, p, a, r).allow {
                    allowed.insert((p.to_string(), a.clone(), r.clone()));
                }
            }
        }
    }
    let expected: BTreeSet<_> = triples
        .iter()
        .map(|&(p, a, r, _)| (p.to_owned(), a.to_owned(), r.to_owned()))
        .collect();
    ensure!(
        allowed == expected,
        "allowed triples over the product space: {allowed:?}"
    );
    let space = principals.len() * actions.len() * resources.len();

    let mut rng = rng(6);
    let mut allows = 0;
    for case in 0..10_000 {
        let mut ids: Vec<String> = (0..rng.gen_range(0..=6))
            .map(|i| format!("r{i:02}"))
            .collect();
        ids.shuffle(&mut rng);
        let rules: Vec<ModelRule> = ids.into_iter().map(|i| random_rule(&mut rng, i)).collect();
        let src = render_rules(&rules);
        let set = parse_policy(&src).map_err(|e| format!("case {case}: {e}\n{src}"))?;
        let (req, now) = random_request(&mut rng);
        let got = evaluate(&set, &req, now);
        let want = oracle_decision(&rules, &req, now);
        ensure!(
            got.allow == want.is_some() && got.matched_rule_id == want,
            "case {case}: evaluate {:?}, oracle {want:?}\n{src}{req:?} now={now}",
            got.matched_rule_id
        );
        allows += usize::from(got.allow);
    }
    Ok(format!(
        "2 triples allowed, 2x27 perturbations denied, exactly 2 allows over {space} combinations, 10000 random requests agree ({allows} allows)"
    ))
}

// ---------------------------------------------------------------------------
// 7. STS gate

fn role(subject: &str) -> StsTrustPolicy {
    let path = fixtures().join("sts/deploy-role.json");
    let mut policy: StsTrustPolicy = serde_json::from_str(&read(&path).unwrap()).unwrap();
    policy.subject_condition = SubjectCondition::Equals(id(subject));
    policy
}

fn criterion_7() -> Outcome {
    const EXPECTED: &str = "spiffe://ci/org/deploy-job";
    const AUD: &str = "sts.amazonaws.com";
    let fx = token_fixture()?;
    let policy: StsTrustPolicy =
        serde_json::from_str(&read(&fixtures().join("sts/deploy-role.json"))?)
            .map_err(|e| e.to_string())?;
    ensure!(
        policy.subject_condition == SubjectCondition::Equals(id(EXPECTED)),
        "fixture subject {:?}",
        policy.subject_condition
    );

    let mut broker = Broker::new(7);
    broker.add_role(policy.clone());
    broker.set_issuer_bundle(fx.bundle.clone());
    let now = 1_717_198_000;
    let creds = broker
        .assume_role(&policy.role_name, &fx.token, now)
        .map_err(|e| format!("fixture token refused: {}", e.code()))?;
    ensure!(
        creds.granted == policy.permissions,
        "granted {:?}",
        creds.granted
    );
    ensure!(
        creds.expires_at - now <= policy.max_session_seconds,
        "session outlives the policy"
    );
    let other = role("spiffe://ci/org/other-job");
    let r = broker.assume_role_with_web_identity(&other, &fx.token, &fx.bundle, now);
    ensure!(
        r == Err(StsError::SubjectMismatch),
        "other-job policy: {r:?}"
    );

    let issuer = td("org.example");
    let config = AuthorityConfig {
        jwt_max_ttl: 600,
        ..AuthorityConfig::default()
    };
    let authority =
        Authority::create(issuer.clone(), config.clone(), T0).map_err(|e| e.to_string())?;
    let impostor = Authority::create(issuer, config.clone(), T0).map_err(|e| e.to_string())?;
    let foreign = Authority::create(td("evil.example"), config, T0).map_err(|e| e.to_string())?;
    let mut broker = Broker::new(8);
    broker.add_role(policy.clone());
    broker.set_issuer_bundle(authority.bundle());
    broker.set_issuer_bundle(foreign.bundle());

    let mut rng = rng(7);
    let subjects: Vec<String> = [
        EXPECTED,
        "spiffe://ci/org/deploy",
        "spiffe://ci/org/deploy-job/x",
        "spiffe://ci/org/Deploy-job",
        "spiffe://org.example/org/deploy-job",
        "spiffe://ci/org/other-job",
        "spiffe://ci",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain((0..100).map(|_| join_id("ci", &["org".to_owned(), gen_segment(&mut rng)])))
    .collect();
    let mut issued_for = Vec::new();
    for sub in &subjects {
        let jwt = authority
            .mint_jwt_svid(&id(sub), &[AUD.to_owned()], 300, T0)
            .map_err(|e| e.to_string())?;
        match broker.assume_role(&policy.role_name, &jwt.token, T0 + 10) {
            Ok(c) => {
                ensure!(
                    c.expires_at - (T0 + 10) <= policy.max_session_seconds,
                    "session lifetime exceeded"
                );
                issued_for.push(sub.clone());
            }
            Err(e) => ensure!(e == StsError::SubjectMismatch, "{sub}: {}", e.code()),
        }
    }
    ensure!(issued_for == [EXPECTED], "issued for {issued_for:?}");

    let good = authority
        .mint_jwt_svid(&id(EXPECTED), &[AUD.to_owned()], 300, T0)
        .map_err(|e| e.to_string())?;
    let other_sub = authority
        .mint_jwt_svid(&id("spiffe://ci/org/other-job"), &[AUD.to_owned()], 300, T0)
        .map_err(|e| e.to_string())?;
    let mut attempts = 0;
    let mut by_kind: BTreeMap<&str, usize> = BTreeMap::new();
    for i in 0..1250 {
        let (kind, token, at) = match i % 5 {
            0 => {
                let ttl = rng.gen_range(1..=300);
                let t = authority
                    .mint_jwt_svid(&id(EXPECTED), &[AUD.to_owned()], ttl, T0)
                    .unwrap();
                (
                    "expired",
                    t.token,
                    T0 + ttl + 30 + rng.gen_range(0..100_000),
                )
            }
            1 => {
                let aud = loop {
                    let a = word(&mut rng, SEG_CHARS, 1..=20);
                    if a != AUD {
                        break a;
                    }
                };
                let t = authority
                    .mint_jwt_svid(&id(EXPECTED), &[aud], 300, T0)
                    .unwrap();
                ("mis-audienced", t.token, T0 + 10)
            }
            2 => {
                let minter = if rng.gen_bool(0.5) {
                    &foreign
                } else {
                    &impostor
                };
                let t = minter
                    .mint_jwt_svid(&id(EXPECTED), &[AUD.to_owned()], 300, T0)
                    .unwrap();
                ("foreign-issuer", t.token, T0 + 10)
            }
            3 => ("tampered", mutate(&mut rng, &good.token), T0 + 10),
            _ => {
                let g: Vec<&str> = good.token.split('.').collect();
                let o: Vec<&str> = other_sub.token.split('.').collect();
                let spliced = if rng.gen_bool(0.5) {
                    format!("{}.{}.{}", o[0], o[1], g[2])
                } else {
                    format!("{}.{}.{}", g[0], o[1], g[2])
                };
                ("spliced", spliced, T0 + 10)
            }
        };
        attempts += 1;
        if let Ok(c) = broker.assume_role(&policy.role_name, &token, at) {
            return Err(format!(
                "{kind} token issued credentials {}",
                c.credential_id
            ));
        }
        *by_kind.entry(kind).or_default() += 1;
    }
    ensure!(
        broker
            .assume_role(&policy.role_name, &good.token, T0 + 10)
            .is_ok(),
        "control token refused"
    );
    Ok(format!(
        "issued only for {EXPECTED} among {} subjects; 0 issuances over {attempts} fuzz tokens {by_kind:?}",
        subjects.len()
    ))
}

// ---------------------------------------------------------------------------
// 8. End-to-end scenarios

const SCENARIOS: [&str; 4] = [
    "single-domain-deploy",
    "multi-tenant-runners",
    "cross-tenant-escalation",
    "cross-domain-federation",
];

fn load_scenario(name: &str) -> Result<Scenario, String> {
    Scenario::load(&fixtures().join(format!("{name}.json"))).map_err(|e| format!("{name}: {e}"))
}

fn records(jsonl: &str) -> Vec<Value> {
    jsonl
        .lines()
        .map(|l| serde_json::from_str(l).expect("audit line is JSON"))
        .collect()
}

fn observed_selectors(info: &WorkloadInfo) -> Vec<String> {
    let mut out = Vec::new();
    out.extend(info.env.iter().map(|(k, v)| format!("env:{k}={v}")));
    out.extend(info.launch_path.iter().map(|p| format!("unix_path:{p}")));
    out.extend(info.sim.iter().map(|(k, v)| format!("sim:{k}={v}")));
    out.extend(
        info.k8s_service_account
            .iter()
            .map(|s| format!("k8s_sa:{s}")),
    );
    out.extend(
        info.docker_labels
            .iter()
            .map(|(k, v)| format!("docker_label:{k}={v}")),
    );
    out
}

fn permits(policy: &StsTrustPolicy, action: &str, resource: &str) -> bool {
    policy
        .permissions
        .iter()
        .any(|p| p.action == action && pattern_matches(&p.resource, resource))
}

fn model_rules(src: &str) -> Result<Vec<ModelRule>, String> {
    let set = parse_policy(src).map_err(|e| e.to_string())?;
    set.rules
        .iter()
        .map(|r| {
            if !r.conditions.is_empty() {
                return Err(format!(
                    "rule {} has conditions; the closure evaluator ignores context",
                    r.rule_id
                ));
            }
            Ok(ModelRule {
                id: r.rule_id.clone(),
                principal: r.principal.to_string(),
                action: r.action.to_string(),
                resource: r.resource.to_string(),
                conditions: Vec::new(),
            })
        })
        .collect()
}

/// Allowed (actor, action, resource) triples for access and exchange steps,
/// predicted from entries, policies and trust policies alone.
fn closure(s: &Scenario) -> Result<BTreeSet<(String, String, String)>, String> {
    let mut out = BTreeSet::new();
    for job in &s.jobs {
        let Some(node_name) = &job.node else { continue };
        let (domain, node) = s
            .domains
            .iter()
            .find_map(|d| {
                d.nodes
                    .iter()
                    .find(|n| &n.name == node_name)
                    .map(|n| (d, n))
            })
            .ok_or_else(|| format!("job {} names unknown node", job.name))?;
        let observed = observed_selectors(&job.workload);
        let identity = domain
            .entries
            .iter()
            .filter(|e| e.parent_id == node.agent_id)
            .filter(|e| {
                e.selectors
                    .iter()
                    .all(|sel| observed.contains(&sel.to_string()))
            })
            .map(|e| e.spiffe_id.to_string())
            .min();
        let Some(identity) = identity else { continue };
        let issuer = format!("spiffe://{}", domain.trust_domain);
        let mut audiences: Vec<String> = Vec::new();
        let mut credentials: Option<&StsTrustPolicy> = None;
        for step in &job.steps {
            match step {
                Step::FetchJwt { aud } => audiences = aud.clone(),
                Step::Exchange { role } => {
                    let policy = s.sts_roles.iter().find(|r| &r.role_name == role);
                    credentials = policy.filter(|p| {
                        let admitted = match &p.subject_condition {
                            SubjectCondition::Equals(sub) => sub.to_string() == identity,
                            SubjectCondition::Like(pat) => {
                                principal_matches(&pat.to_string(), &identity)
                            }
                        };
                        admitted
                            && p.federated_issuer == issuer
                            && audiences.contains(&p.required_audience)
                    });
                    if credentials.is_some() {
                        out.insert((
                            identity.clone(),
                            "sts:AssumeRoleWithWebIdentity".to_owned(),
                            role.clone(),
                        ));
                    }
                }
                Step::Access {
                    policy,
                    action,
                    resource,
                    context,
                    use_credentials,
                } => {
                    ensure!(
                        context.is_empty(),
                        "job {} passes context; the closure evaluator ignores it",
                        job.name
                    );
                    let rules = model_rules(s.policies.get(policy).ok_or("unknown policy")?)?;
                    let req = AccessRequest::new(id(&identity), action, resource);
                    let by_policy = oracle_decision(&rules, &req, s.start_time).is_some();
                    let by_credentials = !use_credentials
                        || credentials.is_some_and(|c| permits(c, action, resource));
                    if by_policy && by_credentials {
                        out.insert((identity.clone(), action.clone(), resource.clone()));
                    }
                }
                _ => {}
            }
        }
    }
    Ok(out)
}

fn first_difference(got: &str, want: &str) -> String {
    for (n, (g, w)) in got.lines().zip(want.lines()).enumerate() {
        if g != w {
            return format!("line {}:\n  got  {g}\n  want {w}", n + 1);
        }
    }
    format!(
        "line counts differ: got {}, want {}",
        got.lines().count(),
        want.lines().count()
    )
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let mut lines = 0;
    let mut closure_sizes = Vec::new();
    for name in SCENARIOS {
        let scenario = load_scenario(name)?;
        let report = run_scenario(&scenario, None).map_err(|e| format!("{name}: {e}"))?;
        let got = report.audit_jsonl();
        let want = read(&fixtures().join(format!("golden/{name}.jsonl")))?;
        ensure!(
            got == want,
            "{name} drifted from its golden log at {}",
            first_difference(&got, &want)
        );
        lines += got.lines().count();

        let recs = records(&got);
        let allowed: BTreeSet<(String, String, String)> = recs
            .iter()
            .filter(|r| {
                r["outcome"] == "allow"
                    && (r["kind"] == "policy_decision" || r["kind"] == "sts_exchange")
            })
            .map(|r| {
                let field = |k: &str| r[k].as_str().unwrap_or_default().to_owned();
                (field("actor"), field("action"), field("resource"))
            })
            .collect();
        let predicted = closure(&scenario)?;
        ensure!(
            allowed == predicted,
            "{name}: allowed {allowed:?}, closure {predicted:?}"
        );
        closure_sizes.push(predicted.len());

        let has = |kind: &str, outcome: &str, detail: &str| {
            recs.iter()
                .any(|r| r["kind"] == kind && r["outcome"] == outcome && r["detail"] == detail)
        };
        match name {
            "single-domain-deploy" => {
                ensure!(
                    report.summary.allowed == 1 && report.summary.denied == 0,
                    "{name}: {:?}",
                    report.summary
                );
                ensure!(
                    recs.iter()
                        .any(|r| r["actor"] == "spiffe://ci/org/deploy-job"
                            && r["kind"] == "sts_exchange"),
                    "{name}: no exchange by the deploy job"
                );
            }
            "multi-tenant-runners" => {
                for tenant in ["team-a", "team-b"] {
                    let actor = format!("spiffe://platform.example.org/ci/{tenant}/release-runner");
                    ensure!(
                        recs.iter().any(|r| r["actor"] == actor.as_str()),
                        "{name}: {actor} absent"
                    );
                }
            }
            "cross-tenant-escalation" => {
                ensure!(
                    has("denial", "deny", "NotAuthorizedForId"),
                    "{name}: no NotAuthorizedForId denial"
                );
            }
            "cross-domain-federation" => {
                let handshakes: Vec<&Value> =
                    recs.iter().filter(|r| r["action"] == "mtls").collect();
                let first_fed = recs
                    .iter()
                    .position(|r| r["kind"] == "federation")
                    .ok_or("no federation record")?;
                let before_fed = recs[..first_fed].iter().filter(|r| r["action"] == "mtls");
                ensure!(
                    before_fed.clone().count() > 0
                        && before_fed
                            .clone()
                            .all(|r| r["detail"] == "HandshakeFailed(UnknownRoot)"),
                    "{name}: pre-exchange handshake did not fail with UnknownRoot"
                );
                let after_fed: Vec<&Value> = recs[first_fed..]
                    .iter()
                    .filter(|r| r["action"] == "mtls")
                    .collect();
                ensure!(
                    !after_fed.is_empty() && after_fed.iter().all(|r| r["outcome"] == "allow"),
                    "{name}: post-exchange handshakes {after_fed:?}"
                );
                ensure!(
                    handshakes.len() == 3,
                    "{name}: {} handshakes",
                    handshakes.len()
                );
            }
            _ => unreachable!(),
        }

        let again = run_scenario(&scenario, None).map_err(|e| e.to_string())?;
        ensure!(again.audit_jsonl() == got, "{name}: second run differs");
    }
    let elapsed = within(start, Duration::from_secs(60))?;
    Ok(format!(
        "4 golden logs match byte for byte ({lines} records), allowed triples equal the offline closure {closure_sizes:?} ({elapsed:.2?})"
    ))
}

// ---------------------------------------------------------------------------
// 9. No-secrets scan

const CANARIES: [&str; 3] = [
    "canary-AKIA4f0e9b1c",
    "canary-sk-77d1e0",
    "canary-label-3c9a",
];

fn scan(name: &str, text: &str) -> Result<(), String> {
    let markers = ["-----BEGIN", "PRIVATE KEY", "eyJ"];
    for needle in markers.iter().chain(CANARIES.iter()) {
        ensure!(!text.contains(needle), "{name} contains {needle:?}");
    }
    Ok(())
}

fn criterion_9() -> Outcome {
    let mut scanned = 0usize;
    for name in SCENARIOS {
        let mut scenario = load_scenario(name)?;
        for job in &mut scenario.jobs {
            job.workload
                .env
                .insert("AWS_ACCESS_KEY_ID".into(), CANARIES[0].into());
            job.workload
                .env
                .insert("AWS_SECRET_ACCESS_KEY".into(), CANARIES[1].into());
            job.workload
                .docker_labels
                .insert("deploy-token".into(), CANARIES[2].into());
        }
        let report = run_scenario(&scenario, None).map_err(|e| format!("{name}: {e}"))?;
        let baseline = run_scenario(&load_scenario(name)?, None).map_err(|e| e.to_string())?;
        ensure!(
            report.summary == baseline.summary,
            "{name}: injected metadata changed the outcome"
        );
        let log = report.audit_jsonl();
        let doc = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?;
        scan(&format!("{name} audit log"), &log)?;
        scan(&format!("{name} report"), &doc)?;
        scanned += log.len() + doc.len();
    }
    let golden = fixtures().join("golden");
    for entry in fs::read_dir(&golden).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let text = read(&path)?;
        scan(&path.display().to_string(), &text)?;
        scanned += text.len();
    }
    Ok(format!("{scanned} bytes of logs, reports and goldens free of key material, tokens and injected credentials"))
}

// ---------------------------------------------------------------------------

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("SPIFFE ID grammar", criterion_1),
        ("attestation oracle equivalence", criterion_2),
        ("SVID closure and isolation", criterion_3),
        ("JWT lifecycle", criterion_4),
        ("rotation continuity", criterion_5),
        ("policy fixtures", criterion_6),
        ("STS gate", criterion_7),
        ("end-to-end scenarios", criterion_8),
        ("no-secrets scan", criterion_9),
    ];
    panic::set_hook(Box::new(|_| {}));
    let start = Instant::now();
    let mut failed = 0;
    println!();
    for (n, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|payload| {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".to_owned());
            Err(format!("panic: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail} [{:.2?}]", n + 1, t.elapsed()),
            Err(reason) => {
                failed += 1;
                println!("FAIL {} {name}: {reason} [{:.2?}]", n + 1, t.elapsed());
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.2?}",
        criteria.len() - failed,
        start.elapsed()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
