use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use minispiffe_core::fixtures::{verify_fixtures, FixtureError};
use minispiffe_core::policy::{explain, Scalar};
use minispiffe_core::server::{admin_request, ServerRequest};
use minispiffe_core::sim::SimError;
use minispiffe_core::{
    evaluate, parse_policy, run_scenario, AccessRequest, RegistrationEntry, Scenario, Selector,
    SpiffeId,
};
use serde_json::json;

use crate::config::read_file;
use crate::output::{CliError, Out};

pub fn id_parse(out: Out, input: &str) -> Result<(), CliError> {
    let id = SpiffeId::parse(input).map_err(|e| CliError::usage(e.code(), e))?;
    let doc = json!({
        "id": id.to_string(),
        "td": id.trust_domain().as_str(),
        "path": id.path(),
        "segments": id.segments(),
    });
    out.emit(&doc, || {
        format!("td: {}\npath: {}", id.trust_domain(), id.path())
    });
    Ok(())
}

/// Parses `k=v`; the value's type is inferred.
pub fn parse_ctx(raw: &str) -> Result<(String, Scalar), String> {
    let (k, v) = raw.split_once('=').ok_or("expected KEY=VALUE")?;
    if k.is_empty() {
        return Err("empty key".into());
    }
    Ok((k.to_owned(), Scalar::infer(v)))
}

pub struct PolicyCheck<'a> {
    pub policy: &'a Path,
    pub id: &'a str,
    pub action: &'a str,
    pub resource: &'a str,
    pub context: BTreeMap<String, Scalar>,
    pub now: i64,
}

/// Allow exits 0; deny is a domain denial (exit 1).
pub fn policy_check(out: Out, args: PolicyCheck<'_>) -> Result<(), CliError> {
    let source = read_file(args.policy)?;
    let set = parse_policy(&source)
        .map_err(|e| CliError::usage(e.code(), format!("{}:{e}", args.policy.display())))?;
    let id = SpiffeId::parse(args.id).map_err(|e| CliError::usage(e.code(), e))?;
    let mut req = AccessRequest::new(id, args.action, args.resource);
    req.context = args.context;
    let decision = evaluate(&set, &req, args.now);
    out.emit(&decision, || explain(&decision));
    if decision.allow {
        Ok(())
    } else {
        Err(CliError::denied("PolicyDenied", "no rule permits the request").already_reported())
    }
}

fn server_rejected(e: minispiffe_core::wire::WireError) -> CliError {
    if e.code == "Unreachable" {
        CliError::runtime(e.code, e.message)
    } else {
        CliError::denied(e.code, e.message)
    }
}

pub struct EntryCreate<'a> {
    pub admin: &'a str,
    pub spiffe_id: &'a str,
    pub parent_id: &'a str,
    pub selectors: &'a [String],
    pub ttl: i64,
    pub node: bool,
}

pub fn entry_create(out: Out, args: EntryCreate<'_>) -> Result<(), CliError> {
    let spiffe_id = SpiffeId::parse(args.spiffe_id).map_err(|e| CliError::usage(e.code(), e))?;
    let parent_id = SpiffeId::parse(args.parent_id).map_err(|e| CliError::usage(e.code(), e))?;
    let selectors = args
        .selectors
        .iter()
        .map(|s| s.parse::<Selector>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::usage("BadSelector", e))?;
    let entry = RegistrationEntry {
        entry_id: String::new(),
        spiffe_id,
        parent_id,
        selectors,
        ttl_seconds: args.ttl,
        is_node_entry: args.node,
    };
    let created: serde_json::Value =
        admin_request(args.admin, &ServerRequest::RegisterEntry { entry })
            .map_err(server_rejected)?;
    out.emit(&created, || {
        format!("created {}", created["entry_id"].as_str().unwrap_or("?"))
    });
    Ok(())
}

pub fn entry_list(out: Out, admin: &str) -> Result<(), CliError> {
    let entries: Vec<RegistrationEntry> =
        admin_request(admin, &ServerRequest::ListEntries).map_err(server_rejected)?;
    out.emit(&entries, || {
        let mut s = String::new();
        for e in &entries {
            let sels: Vec<String> = e.selectors.iter().map(ToString::to_string).collect();
            let kind = if e.is_node_entry { " node" } else { "" };
            s.push_str(&format!(
                "{} {} parent={} ttl={}{kind} selectors={}\n",
                e.entry_id,
                e.spiffe_id,
                e.parent_id,
                e.ttl_seconds,
                sels.join(",")
            ));
        }
        if s.is_empty() {
            s.push_str("no entries\n");
        }
        s
    });
    Ok(())
}

pub fn sim_run(
    out: Out,
    scenario: &Path,
    seed: Option<u64>,
    audit_out: Option<&Path>,
) -> Result<(), CliError> {
    let invalid = |e: SimError| CliError::usage(e.code(), e);
    let scenario = Scenario::load(scenario).map_err(invalid)?;
    let report = run_scenario(&scenario, seed).map_err(invalid)?;
    if let Some(path) = audit_out {
        fs::write(path, report.audit_jsonl())
            .map_err(|e| CliError::runtime("WriteFailed", format!("{}: {e}", path.display())))?;
    }
    let doc = json!({
        "scenario": report.scenario,
        "seed": report.seed,
        "summary": report.summary,
        "records": report.audit.len(),
        "finished_at": report.finished_at,
    });
    out.emit(&doc, || {
        let s = report.summary;
        format!(
            "{} (seed {}): allowed {} denied {} errors {} ({} audit records)",
            report.scenario,
            report.seed,
            s.allowed,
            s.denied,
            s.errors,
            report.audit.len()
        )
    });
    Ok(())
}

/// Drift is exit 1 with the diff on stdout.
pub fn fixtures_verify(out: Out, root: &Path, bless: bool) -> Result<(), CliError> {
    match verify_fixtures(root, bless) {
        Ok(report) => {
            let doc = json!({
                "checked": report.checked,
                "blessed": report.blessed,
                "loaded": report.loaded,
            });
            out.emit(&doc, || {
                let mut s = format!("{} golden files match", report.checked.len());
                if !report.blessed.is_empty() {
                    s.push_str(&format!("; blessed {}", report.blessed.join(", ")));
                }
                s
            });
            Ok(())
        }
        Err(FixtureError::FixtureDrift { files, diff }) => {
            out.emit(
                &json!({"error": "FixtureDrift", "files": files, "diff": diff}),
                || diff.clone(),
            );
            Err(
                CliError::denied("FixtureDrift", format!("drift in {}", files.join(", ")))
                    .already_reported(),
            )
        }
        Err(e @ FixtureError::Invalid { .. }) => Err(CliError::usage(e.code(), e)),
        Err(e) => Err(CliError::runtime(e.code(), e)),
    }
}
