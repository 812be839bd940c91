use std::fmt::Write;

use criterion::{black_box, BenchmarkId, Criterion, Throughput};
use minispiffe_core::{evaluate, parse_policy, AccessRequest, SpiffeId};

const NOW: i64 = 1_717_196_400;

/// `n` rules over distinct tenants, each with one condition.
fn source(n: usize) -> String {
    let mut s = String::new();
    for i in 0..n {
        writeln!(
            s,
            "permit r{i:05} principal \"spiffe://platform.example.org/ci/team-{i}/*\" action \"write\" \
             resource \"s3://team-{i}-artifacts/**\" when {{ branch == \"main\" }};"
        )
        .unwrap();
    }
    s
}

pub fn bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("policy");
    for n in [10usize, 100, 1_000] {
        let src = source(n);
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::new("parse", n), &src, |b, src| {
            b.iter(|| black_box(parse_policy(src).unwrap()))
        });
        let set = parse_policy(&src).unwrap();
        let last = n - 1;
        let id = SpiffeId::parse(&format!(
            "spiffe://platform.example.org/ci/team-{last}/release-runner"
        ))
        .unwrap();
        let mut req = AccessRequest::new(
            id,
            "write",
            &format!("s3://team-{last}-artifacts/release.tar"),
        );
        req.context.insert(
            "branch".into(),
            minispiffe_core::policy::Scalar::infer("main"),
        );
        g.bench_with_input(BenchmarkId::new("evaluate", n), &req, |b, req| {
            b.iter(|| black_box(evaluate(&set, req, NOW)))
        });
    }
    g.finish();
}
