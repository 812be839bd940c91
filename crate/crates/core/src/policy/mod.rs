//! Permit-only authorization DSL.
//!
//! A request is allowed iff some rule matches its principal, action,
//! resource and every condition. Absent rules deny.

mod parser;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::id::{SpiffeId, SpiffeIdPattern};

pub use parser::parse_policy;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("{line}:{col}: syntax error: expected {expected}")]
    SyntaxError {
        line: usize,
        col: usize,
        expected: String,
    },
    #[error("{line}:{col}: duplicate rule id {rule_id:?}")]
    DuplicateRuleId {
        rule_id: String,
        line: usize,
        col: usize,
    },
    #[error("{line}:{col}: bad pattern: {detail}")]
    BadPattern {
        line: usize,
        col: usize,
        detail: String,
    },
}

impl PolicyError {
    pub fn code(&self) -> &'static str {
        match self {
            PolicyError::SyntaxError { .. } => "SyntaxError",
            PolicyError::DuplicateRuleId { .. } => "DuplicateRuleId",
            PolicyError::BadPattern { .. } => "BadPattern",
        }
    }
}

/// Action or resource matcher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StringPattern {
    Any,
    Exact(String),
    /// Matches any string starting with the stored prefix.
    Prefix(String),
}

impl StringPattern {
    pub fn parse(src: &str) -> Result<Self, String> {
        if src == "*" || src == "**" {
            return Ok(StringPattern::Any);
        }
        if src.is_empty() {
            return Err("empty pattern".to_owned());
        }
        let (body, prefix) = match src.strip_suffix("**") {
            Some(body) => (body, true),
            None => (src, false),
        };
        if body.contains('*') {
            return Err("'*' is only allowed as a whole pattern or a trailing '**'".to_owned());
        }
        Ok(if prefix {
            StringPattern::Prefix(body.to_owned())
        } else {
            StringPattern::Exact(body.to_owned())
        })
    }

    pub fn matches(&self, s: &str) -> bool {
        match self {
            StringPattern::Any => true,
            StringPattern::Exact(e) => e == s,
            StringPattern::Prefix(p) => s.starts_with(p.as_str()),
        }
    }
}

impl fmt::Display for StringPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StringPattern::Any => f.write_str("*"),
            StringPattern::Exact(e) => f.write_str(e),
            StringPattern::Prefix(p) => write!(f, "{p}**"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Eq,
    Ne,
    In,
    Before,
    After,
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Op::Eq => "==",
            Op::Ne => "!=",
            Op::In => "in",
            Op::Before => "before",
            Op::After => "after",
        })
    }
}

/// Context value and literal scalar.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Int(i64),
    Str(String),
}

impl Scalar {
    /// Integers where they parse, strings otherwise.
    pub fn infer(raw: &str) -> Self {
        raw.parse()
            .map(Scalar::Int)
            .unwrap_or_else(|_| Scalar::Str(raw.to_owned()))
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Int(i) => write!(f, "{i}"),
            Scalar::Str(s) => write!(f, "{s:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Literal {
    Scalar(Scalar),
    List(Vec<Scalar>),
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Scalar(s) => s.fmt(f),
            Literal::List(items) => {
                f.write_str("[")?;
                for (i, s) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    s.fmt(f)?;
                }
                f.write_str("]")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Condition {
    pub key: String,
    pub op: Op,
    pub value: Literal,
}

impl Condition {
    /// Missing keys and type mismatches evaluate to false.
    pub fn holds(&self, context: &BTreeMap<String, Scalar>, now: i64) -> bool {
        let now_value = Scalar::Int(now);
        let Some(actual) = context
            .get(&self.key)
            .or((self.key == "now").then_some(&now_value))
        else {
            return false;
        };
        match (self.op, &self.value, actual) {
            (Op::Eq, Literal::Scalar(lit), v) => same_type(lit, v) && lit == v,
            (Op::Ne, Literal::Scalar(lit), v) => same_type(lit, v) && lit != v,
            (Op::In, Literal::List(items), v) => items.contains(v),
            (Op::Before, Literal::Scalar(Scalar::Int(t)), Scalar::Int(v)) => v < t,
            (Op::After, Literal::Scalar(Scalar::Int(t)), Scalar::Int(v)) => v > t,
            _ => false,
        }
    }
}

fn same_type(a: &Scalar, b: &Scalar) -> bool {
    matches!(
        (a, b),
        (Scalar::Int(_), Scalar::Int(_)) | (Scalar::Str(_), Scalar::Str(_))
    )
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.key, self.op, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyRule {
    pub rule_id: String,
    pub principal: SpiffeIdPattern,
    pub action: StringPattern,
    pub resource: StringPattern,
    pub conditions: Vec<Condition>,
}

impl PolicyRule {
    /// The first clause that rejects the request, or `None` on a match.
    pub fn failing_clause(&self, req: &AccessRequest, now: i64) -> Option<String> {
        if !self.principal.matches(&req.spiffe_id) {
            return Some(format!("principal \"{}\"", self.principal));
        }
        if !self.action.matches(&req.action) {
            return Some(format!("action \"{}\"", self.action));
        }
        if !self.resource.matches(&req.resource) {
            return Some(format!("resource \"{}\"", self.resource));
        }
        self.conditions
            .iter()
            .find(|c| !c.holds(&req.context, now))
            .map(|c| format!("when {c}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PolicySet {
    pub rules: Vec<PolicyRule>,
    pub source: String,
    /// Non-fatal findings from parsing.
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRequest {
    pub spiffe_id: SpiffeId,
    pub action: String,
    pub resource: String,
    #[serde(default)]
    pub context: BTreeMap<String, Scalar>,
}

impl AccessRequest {
    pub fn new(spiffe_id: SpiffeId, action: &str, resource: &str) -> Self {
        AccessRequest {
            spiffe_id,
            action: action.to_owned(),
            resource: resource.to_owned(),
            context: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleOutcome {
    Match,
    NoMatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub rule_id: String,
    pub outcome: RuleOutcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failing_clause: Option<String>,
}

/// `allow` holds iff `matched_rule_id` is present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub allow: bool,
    pub matched_rule_id: Option<String>,
    pub evaluated_at: i64,
    /// One entry per rule, ordered by rule id.
    pub trace: Vec<TraceEntry>,
}

pub fn evaluate(policies: &PolicySet, request: &AccessRequest, now: i64) -> Decision {
    let mut trace: Vec<TraceEntry> = policies
        .rules
        .iter()
        .map(|rule| {
            let failing_clause = rule.failing_clause(request, now);
            TraceEntry {
                rule_id: rule.rule_id.clone(),
                outcome: if failing_clause.is_none() {
                    RuleOutcome::Match
                } else {
                    RuleOutcome::NoMatch
                },
                failing_clause,
            }
        })
        .collect();
    trace.sort_by(|a, b| a.rule_id.cmp(&b.rule_id));
    let matched_rule_id = trace
        .iter()
        .find(|t| t.outcome == RuleOutcome::Match)
        .map(|t| t.rule_id.clone());
    Decision {
        allow: matched_rule_id.is_some(),
        matched_rule_id,
        evaluated_at: now,
        trace,
    }
}

pub fn explain(decision: &Decision) -> String {
    let mut out = match &decision.matched_rule_id {
        Some(id) => format!("ALLOW via {id}\n"),
        None => "DENY (default)\n".to_owned(),
    };
    for t in &decision.trace {
        match &t.failing_clause {
            None => out.push_str(&format!("  {}: match\n", t.rule_id)),
            Some(c) => out.push_str(&format!("  {}: no match ({c})\n", t.rule_id)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const R1: &str = r#"permit r1 principal "spiffe://ci/org/deploy" action "write" resource "s3://prod-release-artifacts";"#;

    fn req(id: &str, action: &str, resource: &str) -> AccessRequest {
        AccessRequest::new(SpiffeId::parse(id).unwrap(), action, resource)
    }

    #[test]
    fn reference_decision() {
        let set = parse_policy(R1).unwrap();
        let d = evaluate(
            &set,
            &req(
                "spiffe://ci/org/deploy",
                "write",
                "s3://prod-release-artifacts",
            ),
            0,
        );
        assert!(d.allow);
        assert_eq!(d.matched_rule_id.as_deref(), Some("r1"));
        assert!(explain(&d).starts_with("ALLOW via r1\n"));

        let d = evaluate(
            &set,
            &req(
                "spiffe://ci/org/other",
                "write",
                "s3://prod-release-artifacts",
            ),
            0,
        );
        assert!(!d.allow);
        assert_eq!(
            explain(&d),
            "DENY (default)\n  r1: no match (principal \"spiffe://ci/org/deploy\")\n"
        );
    }

    #[test]
    fn empty_set_denies() {
        let d = evaluate(&PolicySet::default(), &req("spiffe://a/b", "x", "y"), 0);
        assert!(!d.allow);
        assert!(d.trace.is_empty());
        assert_eq!(explain(&d), "DENY (default)\n");
    }

    #[test]
    fn conditions_fail_closed() {
        let set = parse_policy(
            r#"permit g principal "spiffe://ci/**" action "*" resource "s3://b/**"
               when { env == "prod", now before 100, n != 3, tier in ["a", 2] };"#,
        )
        .unwrap();
        let mut r = req("spiffe://ci/x", "read", "s3://b/k");
        assert!(!evaluate(&set, &r, 0).allow);
        r.context.insert("env".into(), Scalar::Str("prod".into()));
        r.context.insert("n".into(), Scalar::Int(4));
        r.context.insert("tier".into(), Scalar::Int(2));
        assert!(evaluate(&set, &r, 99).allow);
        assert!(!evaluate(&set, &r, 100).allow);
        r.context.insert("n".into(), Scalar::Str("4".into()));
        let d = evaluate(&set, &r, 0);
        assert_eq!(d.trace[0].failing_clause.as_deref(), Some("when n != 3"));
        r.context.insert("n".into(), Scalar::Int(4));
        r.context.insert("now".into(), Scalar::Int(500));
        assert!(!evaluate(&set, &r, 0).allow);
    }

    #[test]
    fn lowest_rule_id_wins() {
        let set = parse_policy(
            "permit zeta principal \"spiffe://d/**\" action \"*\" resource \"*\";\n\
             permit alpha principal \"spiffe://d/w\" action \"*\" resource \"*\";",
        )
        .unwrap();
        let d = evaluate(&set, &req("spiffe://d/w", "a", "r"), 0);
        assert_eq!(d.matched_rule_id.as_deref(), Some("alpha"));
        assert_eq!(d.trace[0].rule_id, "alpha");
    }

    #[test]
    fn string_patterns() {
        assert_eq!(StringPattern::parse("*"), Ok(StringPattern::Any));
        let p = StringPattern::parse("s3://b/**").unwrap();
        assert!(p.matches("s3://b/x/y"));
        assert!(!p.matches("s3://c/x"));
        assert!(StringPattern::parse("a*b").is_err());
        assert_eq!(p.to_string(), "s3://b/**");
    }

    fn arb_rules() -> impl Strategy<Value = String> {
        let rule = (
            prop::sample::select(vec![
                "spiffe://d/a",
                "spiffe://d/*",
                "spiffe://d/**",
                "spiffe://e/a",
            ]),
            prop::sample::select(vec!["r", "w", "*"]),
            prop::sample::select(vec!["x", "x/**", "*"]),
            prop::option::of(prop::sample::select(vec![
                "k == 1",
                "k != 1",
                "k in [1, 2]",
                "now before 5",
            ])),
        );
        prop::collection::vec(rule, 0..6).prop_map(|rules| {
            rules
                .iter()
                .enumerate()
                .map(|(i, (p, a, r, c))| {
                    let when = c.map(|c| format!(" when {{ {c} }}")).unwrap_or_default();
                    format!(
                        "permit r{i} principal \"{p}\" action \"{a}\" resource \"{r}\"{when};\n"
                    )
                })
                .collect()
        })
    }

    fn arb_request() -> impl Strategy<Value = (AccessRequest, i64)> {
        (
            prop::sample::select(vec![
                "spiffe://d/a",
                "spiffe://d/b",
                "spiffe://d/a/b",
                "spiffe://e/a",
            ]),
            prop::sample::select(vec!["r", "w"]),
            prop::sample::select(vec!["x", "x/y", "z"]),
            prop::option::of(0i64..3),
            0i64..10,
        )
            .prop_map(|(id, a, r, k, now)| {
                let mut q = req(id, a, r);
                if let Some(k) = k {
                    q.context.insert("k".into(), Scalar::Int(k));
                }
                (q, now)
            })
    }

    proptest! {
        #[test]
        fn monotone_under_added_rules(src in arb_rules(), extra in arb_rules(), (q, now) in arb_request()) {
            let base = parse_policy(&src).unwrap();
            let extra = extra.replace("permit r", "permit x");
            let grown = parse_policy(&format!("{src}{extra}")).unwrap();
            if evaluate(&base, &q, now).allow {
                prop_assert!(evaluate(&grown, &q, now).allow);
            }
        }

        #[test]
        fn order_independent(src in arb_rules(), (q, now) in arb_request(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let set = parse_policy(&src).unwrap();
            let mut shuffled = set.clone();
            shuffled.rules.shuffle(&mut rand::rngs::StdRng::seed_from_u64(seed));
            prop_assert_eq!(evaluate(&set, &q, now), evaluate(&shuffled, &q, now));
        }

        #[test]
        fn allow_iff_matched(src in arb_rules(), (q, now) in arb_request()) {
            let d = evaluate(&parse_policy(&src).unwrap(), &q, now);
            prop_assert_eq!(d.allow, d.matched_rule_id.is_some());
        }
    }
}
