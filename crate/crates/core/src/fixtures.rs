//! Golden fixture verification.
//!
//! Layout under the fixtures root:
//!
//! - `*.json`: scenarios; golden is `golden/<name>.jsonl`, the audit log.
//! - `policies/*.policy`: policy files; golden is `golden/<stem>.rules`,
//!   one normalized rule per line.
//! - `sts/*.json`, `entries/*.json`: must load; no golden.
//! - `golden/feature-matrix.md`: generated from every scenario's run.
//!
//! Verification never writes unless `bless` is set.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use similar::TextDiff;
use thiserror::Error;

use crate::attestation::RegistrationEntry;
use crate::policy::{parse_policy, PolicySet};
use crate::sim::{run_scenario, AuditKind, Outcome, RunReport, Scenario};
use crate::sts::StsTrustPolicy;

pub const GOLDEN_DIR: &str = "golden";
pub const FEATURE_MATRIX: &str = "feature-matrix.md";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FixtureError {
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error("fixture drift in {}\n{diff}", files.join(", "))]
    FixtureDrift { files: Vec<String>, diff: String },
}

impl FixtureError {
    pub fn code(&self) -> &'static str {
        match self {
            FixtureError::Io { .. } => "Io",
            FixtureError::Invalid { .. } => "FixtureInvalid",
            FixtureError::FixtureDrift { .. } => "FixtureDrift",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FixtureReport {
    /// Golden files compared, relative to the root.
    pub checked: Vec<String>,
    /// Golden files rewritten.
    pub blessed: Vec<String>,
    /// Fixtures that only had to load.
    pub loaded: Vec<String>,
}

fn io(path: &Path, e: impl ToString) -> FixtureError {
    FixtureError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn invalid(path: &Path, e: impl ToString) -> FixtureError {
    FixtureError::Invalid {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Files in `dir` with `ext`, sorted. A missing directory is empty.
fn files_with(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, FixtureError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn read(path: &Path) -> Result<String, FixtureError> {
    fs::read_to_string(path).map_err(|e| io(path, e))
}

/// Loads and runs every scenario under `root`, in file name order.
pub fn run_bundled(root: &Path) -> Result<Vec<(PathBuf, RunReport)>, FixtureError> {
    files_with(root, "json")?
        .into_iter()
        .map(|path| {
            let scenario = Scenario::load(&path).map_err(|e| invalid(&path, e))?;
            let report = run_scenario(&scenario, None).map_err(|e| invalid(&path, e))?;
            Ok((path, report))
        })
        .collect()
}

/// One line per rule: id, principal, action, resource, then conditions.
pub fn render_rules(set: &PolicySet) -> String {
    let mut out = String::new();
    for r in &set.rules {
        out.push_str(&format!(
            "{} principal \"{}\" action \"{}\" resource \"{}\"",
            r.rule_id, r.principal, r.action, r.resource
        ));
        if !r.conditions.is_empty() {
            let conds: Vec<String> = r.conditions.iter().map(ToString::to_string).collect();
            out.push_str(&format!(" when {{ {} }}", conds.join(", ")));
        }
        out.push('\n');
    }
    out
}

struct Feature {
    name: &'static str,
    shown_by: fn(&RunReport) -> bool,
}

fn any_allowed(report: &RunReport, kind: AuditKind) -> bool {
    report
        .audit
        .iter()
        .any(|r| r.kind == kind && r.outcome == Outcome::Allow)
}

/// Two or more jobs each received a distinct workload identity.
fn per_job_identity(report: &RunReport) -> bool {
    let mut by_job: BTreeMap<&str, &str> = BTreeMap::new();
    for r in &report.audit {
        if r.kind == AuditKind::WorkloadAttest && r.outcome == Outcome::Allow {
            by_job.entry(&r.resource).or_insert(&r.actor);
        }
    }
    let ids: std::collections::BTreeSet<_> = by_job.values().collect();
    by_job.len() >= 2 && ids.len() == by_job.len()
}

const FEATURES: [Feature; 6] = [
    Feature {
        name: "Runtime Issuance",
        shown_by: |r| {
            any_allowed(r, AuditKind::WorkloadAttest) || any_allowed(r, AuditKind::JwtMinted)
        },
    },
    Feature {
        name: "Tied to Job Context",
        shown_by: per_job_identity,
    },
    Feature {
        name: "Supports Federation",
        shown_by: |r| any_allowed(r, AuditKind::Federation),
    },
    Feature {
        name: "Supports mTLS Authentication",
        shown_by: |r| any_allowed(r, AuditKind::Handshake),
    },
    Feature {
        name: "Short-lived Cloud Credentials",
        shown_by: |r| any_allowed(r, AuditKind::StsExchange),
    },
    Feature {
        name: "Identity-based Authorization",
        shown_by: |r| any_allowed(r, AuditKind::PolicyDecision),
    },
];

/// Markdown table of which features the given runs demonstrate.
pub fn feature_matrix(reports: &[RunReport]) -> String {
    let mut out = String::from("| Feature | Demonstrated | Scenarios |\n|---|---|---|\n");
    for f in &FEATURES {
        let names: Vec<&str> = reports
            .iter()
            .filter(|r| (f.shown_by)(r))
            .map(|r| r.scenario.as_str())
            .collect();
        let yes = if names.is_empty() { "No" } else { "Yes" };
        let list = if names.is_empty() {
            "-".to_owned()
        } else {
            names.join(", ")
        };
        out.push_str(&format!("| {} | {yes} | {list} |\n", f.name));
    }
    out
}

/// Compares or blesses one golden file.
fn check(
    root: &Path,
    rel: String,
    actual: &str,
    bless: bool,
    report: &mut FixtureReport,
    drift: &mut Vec<(String, String)>,
) -> Result<(), FixtureError> {
    let path = root.join(&rel);
    let expected = if path.exists() {
        Some(read(&path)?)
    } else {
        None
    };
    if expected.as_deref() == Some(actual) {
        report.checked.push(rel);
        return Ok(());
    }
    if bless {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        }
        fs::write(&path, actual).map_err(|e| io(&path, e))?;
        report.blessed.push(rel);
        return Ok(());
    }
    let old = expected.unwrap_or_default();
    let diff = TextDiff::from_lines(old.as_str(), actual)
        .unified_diff()
        .context_radius(2)
        .header(&format!("a/{rel}"), &format!("b/{rel}"))
        .to_string();
    drift.push((rel, diff));
    Ok(())
}

/// Re-derives every golden file under `root` and diffs it byte for byte.
/// With `bless`, drifted or missing goldens are rewritten instead.
pub fn verify_fixtures(root: &Path, bless: bool) -> Result<FixtureReport, FixtureError> {
    let mut report = FixtureReport::default();
    let mut drift = Vec::new();
    let golden = |name: String| format!("{GOLDEN_DIR}/{name}");

    let runs = run_bundled(root)?;
    for (_, run) in &runs {
        check(
            root,
            golden(format!("{}.jsonl", run.scenario)),
            &run.audit_jsonl(),
            bless,
            &mut report,
            &mut drift,
        )?;
    }
    let reports: Vec<RunReport> = runs.into_iter().map(|(_, r)| r).collect();
    check(
        root,
        golden(FEATURE_MATRIX.to_owned()),
        &feature_matrix(&reports),
        bless,
        &mut report,
        &mut drift,
    )?;

    for path in files_with(&root.join("policies"), "policy")? {
        let set = parse_policy(&read(&path)?).map_err(|e| invalid(&path, e))?;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        check(
            root,
            golden(format!("{stem}.rules")),
            &render_rules(&set),
            bless,
            &mut report,
            &mut drift,
        )?;
    }
    for path in files_with(&root.join("entries"), "json")? {
        let entry: RegistrationEntry =
            serde_json::from_str(&read(&path)?).map_err(|e| invalid(&path, e))?;
        if entry.selectors.is_empty() || entry.ttl_seconds <= 0 {
            return Err(invalid(&path, "entry needs selectors and a positive ttl"));
        }
        report.loaded.push(path.display().to_string());
    }
    for path in files_with(&root.join("sts"), "json")? {
        let value: serde_json::Value =
            serde_json::from_str(&read(&path)?).map_err(|e| invalid(&path, e))?;
        if value.get("role_name").is_some() {
            serde_json::from_value::<StsTrustPolicy>(value).map_err(|e| invalid(&path, e))?;
        } else if !value.get("token").is_some_and(|t| t.is_string()) {
            return Err(invalid(&path, "expected a trust policy or a token fixture"));
        }
        report.loaded.push(path.display().to_string());
    }

    if drift.is_empty() {
        Ok(report)
    } else {
        let (files, diffs): (Vec<_>, Vec<_>) = drift.into_iter().unzip();
        Err(FixtureError::FixtureDrift {
            files,
            diff: diffs.concat(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundled_root() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
    }

    fn copy_tree(from: &Path, to: &Path) {
        fs::create_dir_all(to).unwrap();
        for e in fs::read_dir(from).unwrap() {
            let p = e.unwrap().path();
            let dest = to.join(p.file_name().unwrap());
            if p.is_dir() {
                copy_tree(&p, &dest);
            } else {
                fs::copy(&p, &dest).unwrap();
            }
        }
    }

    #[test]
    fn clean_tree_passes() {
        let report = verify_fixtures(&bundled_root(), false).unwrap();
        assert!(report.blessed.is_empty());
        assert!(report.checked.len() >= 7, "{report:?}");
        assert_eq!(report.loaded.len(), 3);
    }

    #[test]
    fn edited_policy_drifts_and_bless_repairs() {
        let dir = tempfile::tempdir().unwrap();
        copy_tree(&bundled_root(), dir.path());
        let policy = dir.path().join("policies/release-write.policy");
        let text = fs::read_to_string(&policy)
            .unwrap()
            .replace("\"write\"", "\"delete\"");
        fs::write(&policy, text).unwrap();

        let err = verify_fixtures(dir.path(), false).unwrap_err();
        let FixtureError::FixtureDrift { files, diff } = &err else {
            panic!("{err}");
        };
        assert_eq!(files, &["golden/release-write.rules"]);
        assert!(diff.contains("--- a/golden/release-write.rules"));
        assert!(diff.contains("+r1 principal \"spiffe://ci/org/deploy\" action \"delete\""));

        let blessed = verify_fixtures(dir.path(), true).unwrap();
        assert_eq!(blessed.blessed, ["golden/release-write.rules"]);
        assert!(verify_fixtures(dir.path(), false)
            .unwrap()
            .blessed
            .is_empty());
    }

    #[test]
    fn edited_scenario_drifts() {
        let dir = tempfile::tempdir().unwrap();
        copy_tree(&bundled_root(), dir.path());
        let path = dir.path().join("multi-tenant-runners.json");
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"start_at\": 5", "\"start_at\": 6");
        fs::write(&path, text).unwrap();
        let FixtureError::FixtureDrift { files, .. } =
            verify_fixtures(dir.path(), false).unwrap_err()
        else {
            panic!("expected drift");
        };
        assert_eq!(files, ["golden/multi-tenant-runners.jsonl"]);
    }

    #[test]
    fn missing_golden_is_drift_until_blessed() {
        let dir = tempfile::tempdir().unwrap();
        copy_tree(&bundled_root(), dir.path());
        fs::remove_file(dir.path().join("golden/single-domain-deploy.jsonl")).unwrap();
        assert_eq!(
            verify_fixtures(dir.path(), false).unwrap_err().code(),
            "FixtureDrift"
        );
        verify_fixtures(dir.path(), true).unwrap();
        verify_fixtures(dir.path(), false).unwrap();
    }

    #[test]
    fn matrix_marks_demonstrated_features() {
        let reports: Vec<RunReport> = run_bundled(&bundled_root())
            .unwrap()
            .into_iter()
            .map(|(_, r)| r)
            .collect();
        let table = feature_matrix(&reports);
        for row in [
            "| Runtime Issuance | Yes |",
            "| Supports mTLS Authentication | Yes |",
            "| Supports Federation | Yes |",
        ] {
            assert!(table.contains(row), "{table}");
        }
        assert!(feature_matrix(&[]).contains("| Runtime Issuance | No | - |"));
    }
}
